"""Parameterized building blocks: linear maps, layer norm, attention blocks.

Every block exposes ``params() -> dict[name, Tensor]`` for the optimizer and
checkpointing; composition prefixes names with dots. Blocks are pure given
their parameters.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

ATTENTION_MASK_BIAS = -1e9  # additive pre-softmax bias for masked keys


def init_param(rng: np.random.Generator, shape, scale: float | None = None) -> Tensor:
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.w = init_param(rng, (n_in, n_out))
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.w, self.b)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class LayerNorm:
    def __init__(self, c: int):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


class MLP:
    def __init__(self, rng: np.random.Generator, c: int, hidden: int):
        self.fc1 = Linear(rng, c, hidden)
        self.fc2 = Linear(rng, hidden, c)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("fc1", self.fc1.params()),
                **prefixed("fc2", self.fc2.params())}


class MultiHeadAttention:
    """Projections around the fused attention core."""

    def __init__(self, rng: np.random.Generator, c: int, heads: int):
        self.heads = heads
        self.wq = Linear(rng, c, c)
        self.wk = Linear(rng, c, c)
        self.wv = Linear(rng, c, c)
        self.wo = Linear(rng, c, c)

    def __call__(self, q_in: Tensor, kv_in: Tensor,
                 key_bias: np.ndarray | None = None) -> Tensor:
        att = T.mha_core(self.wq(q_in), self.wk(kv_in), self.wv(kv_in),
                         self.heads, key_bias)
        return self.wo(att)

    def probs(self, q_in: Tensor, kv_in: Tensor,
              key_bias: np.ndarray | None = None) -> np.ndarray:
        """Attention weights (heads, Tq, Tk) for inspection."""
        with T.no_grad():
            q = self.wq(q_in).data
            k = self.wk(kv_in).data
        return T.mha_probs(q, k, self.heads, key_bias)

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("wq", self.wq.params()),
                **prefixed("wk", self.wk.params()),
                **prefixed("wv", self.wv.params()),
                **prefixed("wo", self.wo.params())}


class SelfAttBlock:
    """Pre-norm residual self-attention + MLP."""

    def __init__(self, rng: np.random.Generator, c: int, heads: int, mlp_ratio: int):
        self.ln1 = LayerNorm(c)
        self.att = MultiHeadAttention(rng, c, heads)
        self.ln2 = LayerNorm(c)
        self.mlp = MLP(rng, c, c * mlp_ratio)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.att(h, h, key_bias)
        return x + self.mlp(self.ln2(x))

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("ln1", self.ln1.params()),
                **prefixed("att", self.att.params()),
                **prefixed("ln2", self.ln2.params()),
                **prefixed("mlp", self.mlp.params())}


class CrossAttBlock:
    """Decoder block: memory cross-attention, context cross-attention, MLP.

    The memory sublayer is skipped entirely when no memory rows are supplied
    (memory-disabled operation), leaving the residual stream untouched.
    """

    def __init__(self, rng: np.random.Generator, c: int, heads: int, mlp_ratio: int):
        self.ln_mem = LayerNorm(c)
        self.att_mem = MultiHeadAttention(rng, c, heads)
        self.ln_ctx = LayerNorm(c)
        self.att_ctx = MultiHeadAttention(rng, c, heads)
        self.ln_mlp = LayerNorm(c)
        self.mlp = MLP(rng, c, c * mlp_ratio)

    def __call__(self, q: Tensor, mem: Tensor | None, ctx: Tensor,
                 ctx_bias: np.ndarray | None = None) -> Tensor:
        if mem is not None:
            q = q + self.att_mem(self.ln_mem(q), mem)
        q = q + self.att_ctx(self.ln_ctx(q), ctx, ctx_bias)
        return q + self.mlp(self.ln_mlp(q))

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("ln_mem", self.ln_mem.params()),
                **prefixed("att_mem", self.att_mem.params()),
                **prefixed("ln_ctx", self.ln_ctx.params()),
                **prefixed("att_ctx", self.att_ctx.params()),
                **prefixed("ln_mlp", self.ln_mlp.params()),
                **prefixed("mlp", self.mlp.params())}


class HeadMLP:
    """Three-layer prediction head with sigmoid outputs in (0, 1)."""

    def __init__(self, rng: np.random.Generator, c: int, n_out: int):
        self.fc1 = Linear(rng, c, c)
        self.fc2 = Linear(rng, c, c)
        self.fc3 = Linear(rng, c, n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.fc3(T.relu(self.fc2(T.relu(self.fc1(x))))))

    def params(self) -> dict[str, Tensor]:
        return {**prefixed("fc1", self.fc1.params()),
                **prefixed("fc2", self.fc2.params()),
                **prefixed("fc3", self.fc3.params())}
