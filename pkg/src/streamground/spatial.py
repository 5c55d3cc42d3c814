"""Memory-augmented spatial decoder: K blocks plus the box head.

Per frame, block k first inserts the incoming query into partition k of the
spatial bank (this is the bank update), selects memories for the block, and
runs two cross-attentions: query -> selected memory, then query ->
[appearance, text] context rows. The block-K output feeds a sigmoid MLP head
producing a (cx, cy, w, h) box in (0, 1)^4.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import MultimodalFeature
from .layers import CrossAttBlock, HeadMLP, prefixed
from .memory import MemoryBank, SelectedMemory, select_all, select_spatial
from .tensor import Tensor


def stack_selected(sel: SelectedMemory) -> Tensor:
    if len(sel.vectors) == 1:
        v = sel.vectors[0]
        return v if isinstance(v, Tensor) else Tensor(v)
    return T.concat([v if isinstance(v, Tensor) else Tensor(v)
                     for v in sel.vectors], axis=0)


class SpatialDecoder:
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.cfg = cfg
        self.blocks = [CrossAttBlock(rng, cfg.c, cfg.heads, cfg.mlp_ratio)
                       for _ in range(cfg.k)]
        self.head = HeadMLP(rng, cfg.c, 4)

    def select(self, bank: MemoryBank, k: int,
               mm: MultimodalFeature) -> SelectedMemory | None:
        mode = self.cfg.spatial_memory
        if mode == "off":
            return None
        if mode == "all":
            return select_all(bank, k)
        return select_spatial(bank, k, mm.text.data, mm.text_mask,
                              self.cfg.n_s, self.cfg.similarity)

    def block(self, k: int, q: Tensor, mem: SelectedMemory | None,
              mm: MultimodalFeature, ctx: Tensor, ctx_bias: np.ndarray) -> Tensor:
        rows = stack_selected(mem) if mem is not None and mem.vectors else None
        return self.blocks[k - 1](q, rows, ctx, ctx_bias)

    def decode(self, bank: MemoryBank, mm: MultimodalFeature) -> Tensor:
        """Run insert -> select -> block for k = 1..K; returns the final query."""
        cfg = self.cfg
        q = Tensor(np.zeros((1, cfg.c)))
        ctx = T.concat([mm.appearance, mm.text], axis=0)
        ctx_bias = np.concatenate([np.zeros(mm.appearance.shape[0]), mm.text_bias])
        for k in range(1, cfg.k + 1):
            if not cfg.insert_post_block:
                bank.insert(k, q)
            mem = self.select(bank, k, mm)
            q = self.block(k, q, mem, mm, ctx, ctx_bias)
            if cfg.insert_post_block:
                bank.insert(k, q)
        return q

    def predict_box(self, q: Tensor) -> Tensor:
        return self.head(q)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update(prefixed(f"block{i}", blk.params()))
        out.update(prefixed("head", self.head.params()))
        return out
