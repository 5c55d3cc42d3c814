"""Numeric kernels with two interchangeable implementations.

The hot inner loops of the package (softmax/layer-norm forward and backward,
memory-similarity scans, segment decoding) live here as plain
``ndarray -> ndarray`` functions. Each kernel has a pure-numpy implementation
and a numba ``@njit`` twin; which one is exported is decided once at import
time from the ``STREAMGROUND_BACKEND`` environment variable:

    STREAMGROUND_BACKEND=numpy   force the numpy fallbacks
    STREAMGROUND_BACKEND=numba   require numba (ImportError if missing)
    unset / auto                 numba when importable, else numpy

Kernels are deterministic for a fixed backend. All arrays are float64 and
C-contiguous; callers guarantee shapes (2-D where noted).
"""

from __future__ import annotations

import os

import numpy as np

_ENV_VAR = "STREAMGROUND_BACKEND"


# ---------------------------------------------------------------------------
# numpy implementations (the reference path)
# ---------------------------------------------------------------------------

def _softmax_fwd_np(x):
    """Row softmax of a 2-D array, max-subtracted for stability."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(y, g):
    s = (g * y).sum(axis=1, keepdims=True)
    return (g - s) * y


def _log_softmax_fwd_np(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _log_softmax_bwd_np(y, g):
    # y is log-softmax output; d/dx = g - softmax * sum(g)
    return g - np.exp(y) * g.sum(axis=1, keepdims=True)


def _layer_norm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd


def _layer_norm_bwd_np(g, xhat, rstd, gamma):
    gx = g * gamma
    dx = (gx - gx.mean(axis=1, keepdims=True)
          - xhat * (gx * xhat).mean(axis=1, keepdims=True)) * rstd
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    return dx, dgamma, dbeta


def _cosine_scores_np(mem, ref):
    """cosine(mem[j], ref) per row; zero-norm rows (or ref) score 0."""
    rn = np.sqrt((ref * ref).sum())
    mn = np.sqrt((mem * mem).sum(axis=1))
    dots = mem @ ref
    out = np.zeros(mem.shape[0])
    ok = (mn > 0.0) & (rn > 0.0)
    out[ok] = dots[ok] / (mn[ok] * rn)
    return out


def _adjacent_cosine_np(mem):
    """cosine(mem[j], mem[j+1]) for j = 0..T-2; zero-norm pairs score 0."""
    norms = np.sqrt((mem * mem).sum(axis=1))
    dots = (mem[:-1] * mem[1:]).sum(axis=1)
    denom = norms[:-1] * norms[1:]
    out = np.zeros(mem.shape[0] - 1)
    ok = denom > 0.0
    out[ok] = dots[ok] / denom[ok]
    return out


def _best_segment_np(ps, pe):
    """argmax over pairs s <= e of ps[s]*pe[e]; ties -> smaller s, then e."""
    best_s = 0
    best_e = 0
    best_v = ps[0] * pe[0]
    arg = 0
    run = ps[0]
    for e in range(1, ps.shape[0]):
        if ps[e] > run:
            run = ps[e]
            arg = e
        v = run * pe[e]
        if v > best_v:
            best_v = v
            best_s = arg
            best_e = e
    return best_s, best_e


_NP_KERNELS = {
    "softmax_fwd": _softmax_fwd_np,
    "softmax_bwd": _softmax_bwd_np,
    "log_softmax_fwd": _log_softmax_fwd_np,
    "log_softmax_bwd": _log_softmax_bwd_np,
    "layer_norm_fwd": _layer_norm_fwd_np,
    "layer_norm_bwd": _layer_norm_bwd_np,
    "cosine_scores": _cosine_scores_np,
    "adjacent_cosine": _adjacent_cosine_np,
    "best_segment": _best_segment_np,
}


# ---------------------------------------------------------------------------
# numba twins
# ---------------------------------------------------------------------------

def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def softmax_fwd(x):
        n, c = x.shape
        out = np.empty((n, c))
        for i in range(n):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                v = np.exp(x[i, j] - m)
                out[i, j] = v
                s += v
            inv = 1.0 / s
            for j in range(c):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def softmax_bwd(y, g):
        n, c = y.shape
        out = np.empty((n, c))
        for i in range(n):
            s = 0.0
            for j in range(c):
                s += g[i, j] * y[i, j]
            for j in range(c):
                out[i, j] = (g[i, j] - s) * y[i, j]
        return out

    @njit(cache=True)
    def log_softmax_fwd(x):
        n, c = x.shape
        out = np.empty((n, c))
        for i in range(n):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                s += np.exp(x[i, j] - m)
            lse = np.log(s)
            for j in range(c):
                out[i, j] = x[i, j] - m - lse
        return out

    @njit(cache=True)
    def log_softmax_bwd(y, g):
        n, c = y.shape
        out = np.empty((n, c))
        for i in range(n):
            s = 0.0
            for j in range(c):
                s += g[i, j]
            for j in range(c):
                out[i, j] = g[i, j] - np.exp(y[i, j]) * s
        return out

    @njit(cache=True)
    def layer_norm_fwd(x, gamma, beta, eps):
        n, c = x.shape
        y = np.empty((n, c))
        xhat = np.empty((n, c))
        rstd = np.empty((n, 1))
        for i in range(n):
            mu = 0.0
            for j in range(c):
                mu += x[i, j]
            mu /= c
            var = 0.0
            for j in range(c):
                d = x[i, j] - mu
                var += d * d
            var /= c
            r = 1.0 / np.sqrt(var + eps)
            rstd[i, 0] = r
            for j in range(c):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def layer_norm_bwd(g, xhat, rstd, gamma):
        n, c = g.shape
        dx = np.empty((n, c))
        dgamma = np.zeros(c)
        dbeta = np.zeros(c)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(c):
                gx = g[i, j] * gamma[j]
                m1 += gx
                m2 += gx * xhat[i, j]
            m1 /= c
            m2 /= c
            r = rstd[i, 0]
            for j in range(c):
                gx = g[i, j] * gamma[j]
                dx[i, j] = (gx - m1 - xhat[i, j] * m2) * r
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
        return dx, dgamma, dbeta

    @njit(cache=True)
    def cosine_scores(mem, ref):
        t, c = mem.shape
        out = np.zeros(t)
        rn = 0.0
        for j in range(c):
            rn += ref[j] * ref[j]
        rn = np.sqrt(rn)
        if rn == 0.0:
            return out
        for i in range(t):
            dot = 0.0
            mn = 0.0
            for j in range(c):
                dot += mem[i, j] * ref[j]
                mn += mem[i, j] * mem[i, j]
            mn = np.sqrt(mn)
            if mn > 0.0:
                out[i] = dot / (mn * rn)
        return out

    @njit(cache=True)
    def adjacent_cosine(mem):
        t, c = mem.shape
        out = np.zeros(t - 1)
        for i in range(t - 1):
            dot = 0.0
            na = 0.0
            nb = 0.0
            for j in range(c):
                dot += mem[i, j] * mem[i + 1, j]
                na += mem[i, j] * mem[i, j]
                nb += mem[i + 1, j] * mem[i + 1, j]
            denom = np.sqrt(na) * np.sqrt(nb)
            if denom > 0.0:
                out[i] = dot / denom
        return out

    @njit(cache=True)
    def best_segment(ps, pe):
        best_s = 0
        best_e = 0
        best_v = ps[0] * pe[0]
        arg = 0
        run = ps[0]
        for e in range(1, ps.shape[0]):
            if ps[e] > run:
                run = ps[e]
                arg = e
            v = run * pe[e]
            if v > best_v:
                best_v = v
                best_s = arg
                best_e = e
        return best_s, best_e

    return {
        "softmax_fwd": softmax_fwd,
        "softmax_bwd": softmax_bwd,
        "log_softmax_fwd": log_softmax_fwd,
        "log_softmax_bwd": log_softmax_bwd,
        "layer_norm_fwd": layer_norm_fwd,
        "layer_norm_bwd": layer_norm_bwd,
        "cosine_scores": cosine_scores,
        "adjacent_cosine": adjacent_cosine,
        "best_segment": best_segment,
    }


def _select_backend():
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"{_ENV_VAR} must be auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        return "numpy", _NP_KERNELS
    try:
        kernels = _build_numba_kernels()
        return "numba", kernels
    except ImportError:
        if choice == "numba":
            raise
        return "numpy", _NP_KERNELS


BACKEND, _KERNELS = _select_backend()

softmax_fwd = _KERNELS["softmax_fwd"]
softmax_bwd = _KERNELS["softmax_bwd"]
log_softmax_fwd = _KERNELS["log_softmax_fwd"]
log_softmax_bwd = _KERNELS["log_softmax_bwd"]
layer_norm_fwd = _KERNELS["layer_norm_fwd"]
layer_norm_bwd = _KERNELS["layer_norm_bwd"]
cosine_scores = _KERNELS["cosine_scores"]
adjacent_cosine = _KERNELS["adjacent_cosine"]
best_segment = _KERNELS["best_segment"]

# kept importable regardless of the active backend, for tests and benchmarks
numpy_kernels = dict(_NP_KERNELS)
