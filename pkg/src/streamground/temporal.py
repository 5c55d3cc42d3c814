"""Memory-augmented temporal decoder, with box-conditioned motion pooling.

The cascaded wiring pools the fused motion rows inside the predicted box
into a single vector, which joins the text rows as the block context. During
training the pooling is a soft cell-membership average (differentiable in
the box, temperature ``roi_tau``) so gradients reach the spatial decoder
through the cascade; inference uses hard center-inside pooling. The
parallel-wiring variant feeds the full motion grid instead and skips pooling
entirely.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .layers import CrossAttBlock, HeadMLP, prefixed
from .memory import MemoryBank, SelectedMemory, select_all, select_temporal
from .spatial import stack_selected
from .tensor import Tensor

_ROI_EPS = 1e-6


def cell_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (row-major) x and y centers of an H x W grid, each (HW,)."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w,
                         indexing="ij")
    return xs.reshape(-1), ys.reshape(-1)


def roi_pool_hard(motion: np.ndarray, box: np.ndarray, h: int, w: int
                  ) -> tuple[np.ndarray, bool]:
    """Average motion cells whose centers fall inside the box.

    Returns (pooled (1, C), fallback) where fallback marks degenerate boxes
    or boxes containing no cell center, resolved as the single cell holding
    the box center.
    """
    cx, cy, bw, bh = (float(v) for v in np.asarray(box).reshape(-1))
    xs, ys = cell_centers(h, w)
    fallback = bw <= 0.0 or bh <= 0.0
    if not fallback:
        inside = ((xs >= cx - bw / 2) & (xs <= cx + bw / 2)
                  & (ys >= cy - bh / 2) & (ys <= cy + bh / 2))
        if inside.any():
            return motion[inside].mean(axis=0, keepdims=True), False
        fallback = True
    col = min(max(int(cx * w), 0), w - 1)
    row = min(max(int(cy * h), 0), h - 1)
    return motion[row * w + col:row * w + col + 1].copy(), fallback


def roi_pool_soft(motion: Tensor, box: Tensor, h: int, w: int,
                  tau: float) -> Tensor:
    """Differentiable pooling: sigmoid cell-membership weights, normalized."""
    hw = h * w
    xs, ys = cell_centers(h, w)
    xs_row = Tensor(xs.reshape(1, hw))
    ys_row = Tensor(ys.reshape(1, hw))
    ones_row = Tensor(np.ones((1, hw)))

    def spread(scalar: Tensor) -> Tensor:     # (1,1) -> (1,HW)
        return T.matmul(scalar, ones_row)

    cx = T.narrow(box, 1, 0, 1)
    cy = T.narrow(box, 1, 1, 1)
    bw = T.narrow(box, 1, 2, 1)
    bh = T.narrow(box, 1, 3, 1)
    half_w = bw * 0.5
    half_h = bh * 0.5
    inv = 1.0 / tau
    wx = T.sigmoid((xs_row - spread(cx - half_w)) * inv) \
        * T.sigmoid((spread(cx + half_w) - xs_row) * inv)
    wy = T.sigmoid((ys_row - spread(cy - half_h)) * inv) \
        * T.sigmoid((spread(cy + half_h) - ys_row) * inv)
    weights = wx * wy
    total = T.tsum(weights) + _ROI_EPS
    return T.matmul(weights, motion) / total


class TemporalDecoder:
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.cfg = cfg
        self.blocks = [CrossAttBlock(rng, cfg.c, cfg.heads, cfg.mlp_ratio)
                       for _ in range(cfg.k)]
        self.head = HeadMLP(rng, cfg.c, 2)

    def select(self, bank: MemoryBank, k: int) -> SelectedMemory | None:
        mode = self.cfg.temporal_memory
        if mode == "off":
            return None
        if mode == "all":
            return select_all(bank, k)
        return select_temporal(bank, k, alpha=self.cfg.boundary_alpha,
                               threshold=self.cfg.boundary_threshold)

    def block(self, k: int, p: Tensor, mem: SelectedMemory | None,
              ctx: Tensor, ctx_bias: np.ndarray) -> Tensor:
        rows = stack_selected(mem) if mem is not None and mem.vectors else None
        return self.blocks[k - 1](p, rows, ctx, ctx_bias)

    def decode(self, bank: MemoryBank, ctx: Tensor, ctx_bias: np.ndarray) -> Tensor:
        cfg = self.cfg
        p = Tensor(np.zeros((1, cfg.c)))
        for k in range(1, cfg.k + 1):
            if not cfg.insert_post_block:
                bank.insert(k, p)
            mem = self.select(bank, k)
            p = self.block(k, p, mem, ctx, ctx_bias)
            if cfg.insert_post_block:
                bank.insert(k, p)
        return p

    def predict_scores(self, p: Tensor) -> Tensor:
        return self.head(p)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update(prefixed(f"block{i}", blk.params()))
        out.update(prefixed("head", self.head.params()))
        return out
