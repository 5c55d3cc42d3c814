"""Streaming spatio-temporal grounding of queried targets in synthetic video."""

from .config import ModelConfig, RunConfig, TrainConfig
from .synthworld import WorldConfig

__all__ = ["ModelConfig", "RunConfig", "TrainConfig", "WorldConfig"]
__version__ = "0.1.0"
