"""The full grounding model: encoder + spatial decoder + temporal decoder.

One instance owns the parameters; per-stream mutable state (the banks) lives
outside, so a single model can serve many concurrent streams read-only.
"""

from __future__ import annotations

import collections

import numpy as np

from . import tensor as T
from .config import ModelConfig, RunConfig
from .encoder import EncoderParams, MultimodalFeature, encode_frame
from .memory import MemoryBank
from .spatial import SpatialDecoder
from .synthworld import build_vocabulary
from .temporal import TemporalDecoder, roi_pool_hard, roi_pool_soft
from .tensor import Tensor


class GroundingModel:
    def __init__(self, cfg: ModelConfig, h: int, w: int, c_raw: int,
                 vocab_size: int, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.h, self.w, self.c_raw = h, w, c_raw
        self.vocab_size = vocab_size
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([0x6D0DE1, seed])))
        self.encoder = EncoderParams(rng, cfg, h, w, c_raw, vocab_size)
        self.spatial = SpatialDecoder(rng, cfg)
        self.temporal = TemporalDecoder(rng, cfg)
        self.counters: collections.Counter = collections.Counter()

    # -- parameters --------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, obj in (("enc", self.encoder), ("spatial", self.spatial),
                            ("temporal", self.temporal)):
            for name, p in obj.params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)[:4]} "
                           f"extra={sorted(extra)[:4]}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=float)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()

    # -- streaming forward ---------------------------------------------------

    def fresh_banks(self) -> tuple[MemoryBank, MemoryBank]:
        return (MemoryBank(self.cfg.k, self.cfg.c, kind="spatial"),
                MemoryBank(self.cfg.k, self.cfg.c, kind="temporal"))

    def forward_frame(self, banks: tuple[MemoryBank, MemoryBank],
                      appearance_raw: np.ndarray, motion_raw: np.ndarray,
                      tokens: np.ndarray, mask: np.ndarray,
                      train: bool = False,
                      gt_box: np.ndarray | None = None
                      ) -> tuple[Tensor, Tensor, MultimodalFeature]:
        """One frame: encode, spatial decode -> box, pool, temporal decode -> scores."""
        spatial_bank, temporal_bank = banks
        cfg = self.cfg
        mm = encode_frame(self.encoder, appearance_raw, motion_raw, tokens, mask)

        q = self.spatial.decode(spatial_bank, mm)
        box = self.spatial.predict_box(q)

        if cfg.design == "cascaded":
            roi_box = box
            if train and cfg.teacher_force_roi and gt_box is not None:
                roi_box = Tensor(np.asarray(gt_box).reshape(1, 4))
            if train:
                pooled = roi_pool_soft(mm.motion, roi_box, self.h, self.w,
                                       cfg.roi_tau)
            else:
                data, fb = roi_pool_hard(mm.motion.data,
                                         roi_box.data.reshape(-1), self.h, self.w)
                if fb:
                    self.counters["roi_center_fallback"] += 1
                pooled = Tensor(data)
            ctx = T.concat([pooled, mm.text], axis=0)
            ctx_bias = np.concatenate([np.zeros(1), mm.text_bias])
        else:  # parallel: raw motion rows, no box conditioning
            ctx = T.concat([mm.motion, mm.text], axis=0)
            ctx_bias = np.concatenate([np.zeros(self.h * self.w), mm.text_bias])

        p = self.temporal.decode(temporal_bank, ctx, ctx_bias)
        scores = self.temporal.predict_scores(p)
        return box, scores, mm


def build_model(run_cfg: RunConfig) -> GroundingModel:
    vocab = build_vocabulary(run_cfg.world.n_actor_words,
                             run_cfg.world.n_action_words)
    return GroundingModel(run_cfg.model, run_cfg.world.height,
                          run_cfg.world.width, run_cfg.world.c_raw,
                          vocab.size, seed=run_cfg.seed)
