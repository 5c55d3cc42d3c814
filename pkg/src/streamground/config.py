"""Run configuration: dataclasses plus a sectioned key=value file format.

A single config file fully determines a run (CLI flags may override single
keys). Sections map onto the config dataclasses:

    [world]   synthworld.WorldConfig
    [model]   ModelConfig
    [train]   TrainConfig
    [run]     seed, episode counts, paths

Unknown sections or keys are errors, as are values that fail to coerce to
the field's type.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .synthworld import WorldConfig

# Channel/feature sizes used by full-scale backbones; the package itself runs
# at toy scale, these are the defaults to start from when wiring real
# appearance/motion/text extractors into the same interfaces.
FULL_SCALE_DIMS = {
    "c": 256,
    "c_appearance": 2048,
    "c_motion": 768,
    "c_text": 768,
    "n_enc_blocks": 6,
    "n_t": 30,
    "n_frames": 64,
}

MEMORY_MODES = ("selective", "all", "off")
DESIGNS = ("cascaded", "parallel")
SIMILARITIES = ("cosine", "dot")


class ConfigError(ValueError):
    """Malformed run configuration."""


@dataclass(frozen=True)
class ModelConfig:
    c: int = 32
    k: int = 2                   # decoder blocks == memory partitions
    n_enc_blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    n_t: int = 30
    c_t: int = 16
    n_s: int = 32                # spatial memories kept after selection
    spatial_memory: str = "selective"
    temporal_memory: str = "selective"
    design: str = "cascaded"
    boundary_alpha: float = 1.0
    boundary_threshold: float = float("nan")   # NaN = use mean - alpha*std rule
    similarity: str = "cosine"
    insert_post_block: bool = False
    roi_tau: float = 0.1
    teacher_force_roi: bool = False
    giou: bool = True
    seq_tau: float = 0.05   # temperature of the softmax over frames

    def validate(self) -> None:
        for name in ("c", "k", "heads", "mlp_ratio", "n_t", "c_t", "n_s"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.n_enc_blocks < 0:
            raise ConfigError("model.n_enc_blocks must be >= 0")
        if self.c % self.heads:
            raise ConfigError(f"model.c={self.c} not divisible by heads={self.heads}")
        if self.spatial_memory not in MEMORY_MODES:
            raise ConfigError(f"model.spatial_memory must be one of {MEMORY_MODES}")
        if self.temporal_memory not in MEMORY_MODES:
            raise ConfigError(f"model.temporal_memory must be one of {MEMORY_MODES}")
        if self.design not in DESIGNS:
            raise ConfigError(f"model.design must be one of {DESIGNS}")
        if self.similarity not in SIMILARITIES:
            raise ConfigError(f"model.similarity must be one of {SIMILARITIES}")
        if self.roi_tau <= 0:
            raise ConfigError("model.roi_tau must be positive")
        if self.seq_tau <= 0:
            raise ConfigError("model.seq_tau must be positive")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    lambda_k: float = 10.0
    lambda_l: float = 5.0
    lambda_u: float = 3.0
    kl_sigma: float = 1.0
    checkpoint_every: int = 0    # steps between checkpoints; 0 = final only

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if min(self.lambda_k, self.lambda_l, self.lambda_u) < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    n_episodes: int = 16
    data: str = ""
    out: str = ""
    checkpoint: str = ""

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.world.validate()
        if self.n_episodes < 1:
            raise ConfigError("run.n_episodes must be >= 1")


_SECTION_TYPES = {
    "world": WorldConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}
_RUN_KEYS = ("seed", "n_episodes", "data", "out", "checkpoint")


def _coerce(section: str, key: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except ValueError:
        raise ConfigError(
            f"[{section}] {key} = {raw!r} is not a valid {target_type.__name__}"
        ) from None


def _parse_section(parser: configparser.ConfigParser, section: str, cls):
    kwargs = {}
    if not parser.has_section(section):
        return cls()
    known = {f.name: f for f in fields(cls)}
    for key, raw in parser.items(section):
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        ftype = known[key].type
        if isinstance(ftype, str):  # from __future__ annotations
            ftype = {"int": int, "float": float, "bool": bool, "str": str}[ftype]
        kwargs[key] = _coerce(section, key, raw, ftype)
    return cls(**kwargs)


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from None
    for section in parser.sections():
        if section not in (*_SECTION_TYPES, "run"):
            raise ConfigError(f"unknown section [{section}]")
    world = _parse_section(parser, "world", WorldConfig)
    model = _parse_section(parser, "model", ModelConfig)
    train = _parse_section(parser, "train", TrainConfig)
    run_kwargs = {}
    if parser.has_section("run"):
        run_fields = {f.name: f for f in fields(RunConfig)}
        for key, raw in parser.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown key [run] {key}")
            ftype = run_fields[key].type
            if isinstance(ftype, str):
                ftype = {"int": int, "str": str}[ftype]
            run_kwargs[key] = _coerce("run", key, raw, ftype)
    cfg = RunConfig(world=world, model=model, train=train, **run_kwargs)
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings on top of a parsed config."""
    world = dict()
    model = dict()
    train = dict()
    run = dict()
    buckets = {"world": world, "model": model, "train": train, "run": run}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        if "." not in lhs:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        section, key = lhs.split(".", 1)
        section, key = section.strip(), key.strip()
        if section not in buckets:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        buckets[section][key] = value.strip()
    def _rebuild(obj, updates, section):
        if not updates:
            return obj
        known = {f.name: f for f in fields(obj)}
        kwargs = {}
        for key, raw in updates.items():
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            ftype = known[key].type
            if isinstance(ftype, str):
                ftype = {"int": int, "float": float, "bool": bool, "str": str}[ftype]
            kwargs[key] = _coerce(section, key, raw, ftype)
        return dataclasses.replace(obj, **kwargs)
    new = RunConfig(
        world=_rebuild(cfg.world, world, "world"),
        model=_rebuild(cfg.model, model, "model"),
        train=_rebuild(cfg.train, train, "train"),
        seed=int(_coerce("run", "seed", run["seed"], int)) if "seed" in run else cfg.seed,
        n_episodes=int(_coerce("run", "n_episodes", run["n_episodes"], int))
        if "n_episodes" in run else cfg.n_episodes,
        data=str(run.get("data", cfg.data)),
        out=str(run.get("out", cfg.out)),
        checkpoint=str(run.get("checkpoint", cfg.checkpoint)),
    )
    for key in run:
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown key [run] {key}")
    try:
        new.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return new


def dump_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig to the sectioned key=value format."""
    out = io.StringIO()
    for section, obj in (("world", cfg.world), ("model", cfg.model),
                         ("train", cfg.train)):
        out.write(f"[{section}]\n")
        for f in fields(obj):
            out.write(f"{f.name} = {getattr(obj, f.name)}\n")
        out.write("\n")
    out.write("[run]\n")
    out.write(f"seed = {cfg.seed}\n")
    out.write(f"n_episodes = {cfg.n_episodes}\n")
    for key in ("data", "out", "checkpoint"):
        val = getattr(cfg, key)
        if val:
            out.write(f"{key} = {val}\n")
    return out.getvalue()
