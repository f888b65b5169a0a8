"""Dense fp32 primitives.

Tensors are plain ``numpy.ndarray`` objects with dtype float32 in row-major
(C) order. Every function here is pure and raises :class:`ShapeError`
instead of broadcasting when shapes disagree.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ShapeError

DTYPE = np.float32


def as_tensor(x, dims: Sequence[int] | None = None) -> np.ndarray:
    """Coerce ``x`` to a contiguous float32 array, optionally reshaping to ``dims``."""
    arr = np.ascontiguousarray(np.asarray(x, dtype=DTYPE))
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d <= 0 for d in dims):
            raise ShapeError(f"dims must be positive, got {dims}")
        if arr.size != int(np.prod(dims)):
            raise ShapeError(f"{arr.size} values cannot fill dims {dims}")
        arr = arr.reshape(dims)
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    return np.matmul(a.astype(DTYPE, copy=False), b.astype(DTYPE, copy=False))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + DTYPE(eps))) * gain + bias


def cross_entropy(logits: np.ndarray, targets) -> float:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [n, V], got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for {n} rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target out of range [0, {v})")
    logp = log_softmax_rows(logits)
    return float(-logp[np.arange(n), t].mean(dtype=DTYPE))


def gelu(x: np.ndarray) -> np.ndarray:
    c = DTYPE(np.sqrt(2.0 / np.pi))
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(c * (x + DTYPE(0.044715) * x * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    c = DTYPE(np.sqrt(2.0 / np.pi))
    inner = c * (x + DTYPE(0.044715) * x * x * x)
    th = np.tanh(inner)
    dinner = c * (DTYPE(1.0) + DTYPE(3 * 0.044715) * x * x)
    return DTYPE(0.5) * (DTYPE(1.0) + th) + DTYPE(0.5) * x * (DTYPE(1.0) - th * th) * dinner


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = DTYPE(1.0) / (DTYPE(1.0) + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (DTYPE(1.0) + ex)
    return out


def is_finite(x: np.ndarray) -> bool:
    return bool(np.isfinite(x).all())
