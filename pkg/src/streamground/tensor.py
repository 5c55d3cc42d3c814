"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design:

* A ``Tensor`` wraps a C-contiguous float64 ndarray plus an optional ``grad``
  buffer. Values are immutable after creation; only ``grad`` accumulates.
* Operations execute eagerly in numpy (hot kernels dispatched through
  :mod:`streamground.backend`). When a :class:`Tape` is active and an input
  requires grad, the op appends a node ``(out, backward_fn)`` to the tape.
  Execution order is topological by construction, so the backward pass is a
  single reverse sweep, robust to arbitrarily deep graphs.
* ``backward`` accumulates gradients additively across uses and skips nodes
  whose outputs received no gradient.
* Every op output is checked for NaN/Inf; a non-finite value raises
  immediately instead of propagating.

Broadcasting is intentionally minimal: same-shape, scalar, and trailing-axis
row vectors, which is all the model needs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


# Optional allocation hook; the streaming engine uses it to meter per-frame
# activation footprints. Called with nbytes on every Tensor creation.
_ALLOC_HOOK: Callable[[int], None] | None = None


def set_alloc_hook(hook: Callable[[int], None] | None) -> None:
    global _ALLOC_HOOK
    _ALLOC_HOOK = hook


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a NaN/Inf anywhere makes the sum non-finite; one reduction beats an
    # elementwise isfinite scan in the op hot path
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by {op}")


_TAPE_STACK: list["Tape | None"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order (inputs always precede outputs), so
    replaying the list in reverse applies the chain rule correctly.
    """

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: "Tensor", bwd: Callable[[np.ndarray], None]) -> None:
        self.nodes.append((out, bwd))

    def backward(self, loss: "Tensor") -> None:
        """Populate ``grad`` for every requires_grad tensor feeding ``loss``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss._accum(np.ones_like(loss.data))
        for out, bwd in reversed(self.nodes):
            if out.grad is None:
                continue
            bwd(out.grad)


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self) -> None:
        _TAPE_STACK.append(None)

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        if _ALLOC_HOOK is not None:
            _ALLOC_HOOK(arr.nbytes)

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], op: str) -> tuple[Tensor, "Tape | None"]:
    _check_finite(out_data, op)
    tape = _active_tape()
    rg = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg)
    return out, (tape if rg else None)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _grad_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo the limited broadcasting used by the binary ops."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return g.sum().reshape(shape)
    # trailing-axis row vector (n,) or (1, n) broadcast over leading rows
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1
    )
    return g.sum(axis=axes, keepdims=False).reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b, op: str):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e
    out, tape = _make(out_data, (a, b), op)
    if tape is not None:
        def bwd(g):
            if a.requires_grad:
                a._accum(_grad_to_shape(bwd_a(g), a.shape))
            if b.requires_grad:
                b._accum(_grad_to_shape(bwd_b(g), b.shape))
        tape.record(out, bwd)
    return out


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g: g, lambda g: g, "add")


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g: g, lambda g: -g, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, lambda x, y: x * y,
                   lambda g: g * b.data, lambda g: g * a.data, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, lambda x, y: x / y,
                   lambda g: g / b.data,
                   lambda g: -g * a.data / (b.data * b.data), "div")


def neg(a):
    a = as_tensor(a)
    out, tape = _make(-a.data, (a,), "neg")
    if tape is not None:
        tape.record(out, lambda g: a._accum(-g))
    return out


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data >= b.data
    return _binary(a, b, lambda x, y: np.maximum(x, y),
                   lambda g: g * mask, lambda g: g * ~mask, "maximum")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data <= b.data
    return _binary(a, b, lambda x, y: np.minimum(x, y),
                   lambda g: g * mask, lambda g: g * ~mask, "minimum")


# ---------------------------------------------------------------------------
# unary ops
# ---------------------------------------------------------------------------

def _unary(a, out_data, grad_fn, op: str):
    out, tape = _make(out_data, (a,), op)
    if tape is not None:
        tape.record(out, lambda g: a._accum(grad_fn(g)))
    return out


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0.0), lambda g: g * mask, "relu")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _unary(a, y, lambda g: g * y * (1.0 - y), "sigmoid")


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _unary(a, y, lambda g: g * y, "exp")


def log(a):
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda g: g / a.data, "log")


def absolute(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _unary(a, np.abs(a.data), lambda g: g * s, "abs")


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy() if np.ndim(g) == 0 else np.full(a.shape, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _unary(a, out_data, grad_fn, "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    out, tape = _make(a.data.reshape(shape), (a,), "reshape")
    if tape is not None:
        tape.record(out, lambda g: a._accum(g.reshape(a.shape)))
    return out


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out, tape = _make(np.ascontiguousarray(a.data.T), (a,), "transpose")
    if tape is not None:
        tape.record(out, lambda g: a._accum(g.T))
    return out


def narrow(a, axis: int, start: int, length: int):
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    if axis < 0 or axis >= a.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for shape {a.shape}")
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}] exceeds axis {axis} of {a.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(a.ndim))
    out, tape = _make(np.ascontiguousarray(a.data[idx]), (a,), "narrow")
    if tape is not None:
        def bwd(g):
            full = np.zeros(a.shape)
            full[idx] = g
            a._accum(full)
        tape.record(out, bwd)
    return out


def concat(tensors: Iterable, axis: int = 0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    out, tape = _make(out_data, ts, "concat")
    if tape is not None:
        sizes = [t.shape[axis] for t in ts]
        def bwd(g):
            off = 0
            for t, n in zip(ts, sizes):
                if t.requires_grad:
                    idx = tuple(slice(None) if i != axis else slice(off, off + n)
                                for i in range(g.ndim))
                    t._accum(g[idx])
                off += n
        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra and neural primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out, tape = _make(a.data @ b.data, (a, b), "matmul")
    if tape is not None:
        def bwd(g):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)
        tape.record(out, bwd)
    return out


def affine(x, w, b):
    """Fused ``x @ w + b`` with b broadcast over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] \
            or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out, tape = _make(x.data @ w.data + b.data, (x, w, b), "affine")
    if tape is not None:
        def bwd(g):
            if x.requires_grad:
                x._accum(g @ w.data.T)
            if w.requires_grad:
                w._accum(x.data.T @ g)
            if b.requires_grad:
                b._accum(g.sum(axis=0))
        tape.record(out, bwd)
    return out


def embedding(table, ids):
    """Row gather ``table[ids]``; backward scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    out, tape = _make(table.data[ids], (table,), "embedding")
    if tape is not None:
        def bwd(g):
            full = np.zeros(table.shape)
            np.add.at(full, ids, g)
            table._accum(full)
        tape.record(out, bwd)
    return out


def softmax(a, axis: int = -1):
    a = as_tensor(a)
    if a.data.size == 0 or a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    moved = np.moveaxis(a.data, axis, -1)
    flat = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
    y_flat = backend.softmax_fwd(flat)
    y = np.moveaxis(y_flat.reshape(moved.shape), -1, axis)
    out, tape = _make(np.ascontiguousarray(y), (a,), "softmax")
    if tape is not None:
        def bwd(g):
            gm = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(flat.shape))
            dx = backend.softmax_bwd(y_flat, gm)
            a._accum(np.moveaxis(dx.reshape(moved.shape), -1, axis))
        tape.record(out, bwd)
    return out


def log_softmax(a, axis: int = -1):
    a = as_tensor(a)
    if a.data.size == 0 or a.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    moved = np.moveaxis(a.data, axis, -1)
    flat = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
    y_flat = backend.log_softmax_fwd(flat)
    y = np.moveaxis(y_flat.reshape(moved.shape), -1, axis)
    out, tape = _make(np.ascontiguousarray(y), (a,), "log_softmax")
    if tape is not None:
        def bwd(g):
            gm = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(flat.shape))
            dx = backend.log_softmax_bwd(y_flat, gm)
            a._accum(np.moveaxis(dx.reshape(moved.shape), -1, axis))
        tape.record(out, bwd)
    return out


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS):
    """Normalize the last axis of a 2-D tensor to zero mean, unit variance."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"layer_norm expects a non-empty 2-D tensor, got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm affine params must have shape ({x.shape[1]},), "
            f"got {gamma.shape} and {beta.shape}")
    y, xhat, rstd = backend.layer_norm_fwd(x.data, gamma.data, beta.data, eps)
    out, tape = _make(y, (x, gamma, beta), "layer_norm")
    if tape is not None:
        def bwd(g):
            dx, dgamma, dbeta = backend.layer_norm_bwd(g, xhat, rstd, gamma.data)
            if x.requires_grad:
                x._accum(dx)
            if gamma.requires_grad:
                gamma._accum(dgamma)
            if beta.requires_grad:
                beta._accum(dbeta)
        tape.record(out, bwd)
    return out


def mha_core(q, k, v, n_heads: int, key_bias: np.ndarray | None = None):
    """Multi-head scaled dot-product attention over already-projected inputs.

    q: (Tq, C), k/v: (Tk, C), C divisible by n_heads. ``key_bias`` is an
    additive pre-softmax score bias of shape (Tk,), used for PAD masking; it
    is a constant (no gradient).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    tq, c = q.shape
    tk, ck = k.shape
    if ck != c or v.shape != (tk, c):
        raise ShapeError(f"mha_core: mismatched shapes q{q.shape} k{k.shape} v{v.shape}")
    if c % n_heads:
        raise ShapeError(f"mha_core: width {c} not divisible by {n_heads} heads")
    d = c // n_heads
    scale = 1.0 / math.sqrt(d)

    qh = q.data.reshape(tq, n_heads, d).transpose(1, 0, 2)   # (h, Tq, d)
    kh = k.data.reshape(tk, n_heads, d).transpose(1, 0, 2)
    vh = v.data.reshape(tk, n_heads, d).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale            # (h, Tq, Tk)
    if key_bias is not None:
        scores = scores + key_bias[None, None, :]
    p_flat = backend.softmax_fwd(np.ascontiguousarray(scores.reshape(-1, tk)))
    p = p_flat.reshape(n_heads, tq, tk)
    oh = p @ vh                                              # (h, Tq, d)
    out_data = np.ascontiguousarray(oh.transpose(1, 0, 2).reshape(tq, c))

    out, tape = _make(out_data, (q, k, v), "mha_core")
    if tape is not None:
        def bwd(g):
            go = g.reshape(tq, n_heads, d).transpose(1, 0, 2)
            if v.requires_grad:
                dv = p.transpose(0, 2, 1) @ go
                v._accum(np.ascontiguousarray(dv.transpose(1, 0, 2).reshape(tk, c)))
            dp = go @ vh.transpose(0, 2, 1)
            ds = backend.softmax_bwd(p_flat, np.ascontiguousarray(dp.reshape(-1, tk)))
            ds = ds.reshape(n_heads, tq, tk) * scale
            if q.requires_grad:
                dq = ds @ kh
                q._accum(np.ascontiguousarray(dq.transpose(1, 0, 2).reshape(tq, c)))
            if k.requires_grad:
                dk = ds.transpose(0, 2, 1) @ qh
                k._accum(np.ascontiguousarray(dk.transpose(1, 0, 2).reshape(tk, c)))
        tape.record(out, bwd)
    return out


def mha_probs(q_data: np.ndarray, k_data: np.ndarray, n_heads: int,
              key_bias: np.ndarray | None = None) -> np.ndarray:
    """Attention weights of :func:`mha_core` for inspection, shape (h, Tq, Tk)."""
    tq, c = q_data.shape
    tk = k_data.shape[0]
    d = c // n_heads
    qh = q_data.reshape(tq, n_heads, d).transpose(1, 0, 2)
    kh = k_data.reshape(tk, n_heads, d).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) / math.sqrt(d)
    if key_bias is not None:
        scores = scores + key_bias[None, None, :]
    p = backend.softmax_fwd(np.ascontiguousarray(scores.reshape(-1, tk)))
    return p.reshape(n_heads, tq, tk)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numeric_grad(fn: Callable[[], float], params: Sequence[Tensor],
                 h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of ``fn()`` w.r.t. each tensor in ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn()
            flat[i] = orig - h
            f_minus = fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a-b| / max(|a|, |b|, floor), the gradient-check metric."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
