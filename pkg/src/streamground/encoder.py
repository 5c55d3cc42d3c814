"""Multimodal encoder: per-modality embedding, fusion, deconcatenation.

Raw appearance/motion grids are flattened row-major and projected to the
common width C by learnable affine maps (standing in for heavyweight visual
backbones); query tokens go through an embedding table and a projection.
The three modality segments are concatenated with position and type
embeddings, fused by a stack of self-attention blocks with PAD keys masked
out, and split back into per-modality features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .layers import (ATTENTION_MASK_BIAS, Linear, SelfAttBlock, init_param,
                     prefixed)
from .tensor import Tensor


@dataclass
class MultimodalFeature:
    """Fused per-frame features: HW appearance rows, HW motion rows, N_t text rows."""

    appearance: Tensor     # (HW, C)
    motion: Tensor         # (HW, C)
    text: Tensor           # (N_t, C)
    text_mask: np.ndarray  # (N_t,) bool, True on real tokens

    @property
    def text_bias(self) -> np.ndarray:
        return np.where(self.text_mask, 0.0, ATTENTION_MASK_BIAS)


class EncoderParams:
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig,
                 h: int, w: int, c_raw: int, vocab_size: int):
        self.h, self.w, self.c_raw = h, w, c_raw
        self.cfg = cfg
        c = cfg.c
        self.proj_app = Linear(rng, c_raw, c)
        self.proj_motion = Linear(rng, c_raw, c)
        self.tok_embed = init_param(rng, (vocab_size, cfg.c_t), scale=0.02)
        self.proj_text = Linear(rng, cfg.c_t, c)
        self.seq_len = 2 * h * w + cfg.n_t
        self.e_pos = init_param(rng, (self.seq_len, c), scale=0.02)
        self.e_typ = init_param(rng, (3, c), scale=0.02)
        onehot = np.zeros((self.seq_len, 3))
        onehot[:h * w, 0] = 1.0
        onehot[h * w:2 * h * w, 1] = 1.0
        onehot[2 * h * w:, 2] = 1.0
        self._typ_rows = Tensor(onehot)   # constant selector, (L, 3)
        self.blocks = [SelfAttBlock(rng, c, cfg.heads, cfg.mlp_ratio)
                       for _ in range(cfg.n_enc_blocks)]

    def params(self) -> dict[str, Tensor]:
        out = {**prefixed("proj_app", self.proj_app.params()),
               **prefixed("proj_motion", self.proj_motion.params()),
               "tok_embed": self.tok_embed,
               **prefixed("proj_text", self.proj_text.params()),
               "e_pos": self.e_pos,
               "e_typ": self.e_typ}
        for i, blk in enumerate(self.blocks):
            out.update(prefixed(f"block{i}", blk.params()))
        return out


def embed_modalities(enc: EncoderParams, appearance_raw: np.ndarray,
                     motion_raw: np.ndarray, tokens: np.ndarray,
                     mask: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Project raw inputs to width C; PAD text rows are zeroed by the mask."""
    h, w, c_raw = enc.h, enc.w, enc.c_raw
    if appearance_raw.shape != (h, w, c_raw) or motion_raw.shape != (h, w, c_raw):
        raise T.ShapeError(
            f"raw grids must be {(h, w, c_raw)}, got {appearance_raw.shape} "
            f"and {motion_raw.shape}")
    if tokens.shape != (enc.cfg.n_t,):
        raise T.ShapeError(f"tokens must be ({enc.cfg.n_t},), got {tokens.shape}")
    fa = enc.proj_app(Tensor(appearance_raw.reshape(h * w, c_raw)))
    fm = enc.proj_motion(Tensor(motion_raw.reshape(h * w, c_raw)))
    ft = enc.proj_text(T.embedding(enc.tok_embed, tokens))
    ft = ft * Tensor(mask.astype(float).reshape(-1, 1))
    return fa, fm, ft


def fuse(enc: EncoderParams, fa: Tensor, fm: Tensor, ft: Tensor,
         mask: np.ndarray) -> MultimodalFeature:
    """Concatenate, add position/type embeddings, run the fusion stack, split."""
    hw = enc.h * enc.w
    n_t = enc.cfg.n_t
    x = T.concat([fa, fm, ft], axis=0)
    if x.shape[0] != enc.seq_len:
        raise T.ShapeError(
            f"fused sequence must have {enc.seq_len} rows, got {x.shape[0]}")
    x = x + enc.e_pos + T.matmul(enc._typ_rows, enc.e_typ)
    key_bias = np.concatenate([np.zeros(2 * hw),
                               np.where(mask, 0.0, ATTENTION_MASK_BIAS)])
    for blk in enc.blocks:
        x = blk(x, key_bias)
    return MultimodalFeature(
        appearance=T.narrow(x, 0, 0, hw),
        motion=T.narrow(x, 0, hw, hw),
        text=T.narrow(x, 0, 2 * hw, n_t),
        text_mask=mask,
    )


def encode_frame(enc: EncoderParams, appearance_raw: np.ndarray,
                 motion_raw: np.ndarray, tokens: np.ndarray,
                 mask: np.ndarray) -> MultimodalFeature:
    fa, fm, ft = embed_modalities(enc, appearance_raw, motion_raw, tokens, mask)
    return fuse(enc, fa, fm, ft, mask)
