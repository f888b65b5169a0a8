"""Minimal reverse-mode autodiff over fp32 numpy arrays.

Only the ops the transformer and the DDPG networks need are provided. A
``Var`` that does not require grad keeps no graph, so frozen weights cost
nothing on the backward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ShapeError, StateError
from . import tensor as T

DTYPE = T.DTYPE


class Var:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == DTYPE else np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}{self.data.shape}{' grad' if self.requires_grad else ''}"


def leaf(data, requires_grad: bool = False, name: str | None = None) -> Var:
    return Var(data, requires_grad=requires_grad, name=name)


def _node(out: np.ndarray, parents: Sequence[Var], fn: Callable) -> Var:
    v = Var(out)
    if any(p.requires_grad for p in parents):
        v.requires_grad = True
        v.parents = tuple(parents)
        v.backward_fn = fn
    return v


def _check_same(a: Var, b: Var, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")


# elementwise / structural -------------------------------------------------

def add(a: Var, b: Var) -> Var:
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_bias(x: Var, b: Var) -> Var:
    n = x.shape[-1]
    if b.shape != (n,):
        raise ShapeError(f"add_bias: bias {b.shape} vs last dim {n}")

    def fn(g):
        return g, g.reshape(-1, n).sum(axis=0)

    return _node(x.data + b.data, (x, b), fn)


def scale(x: Var, c: float) -> Var:
    c = DTYPE(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def mul_const(x: Var, c: np.ndarray) -> Var:
    if c.shape != x.shape:
        raise ShapeError(f"mul_const: {c.shape} vs {x.shape}")
    return _node(x.data * c, (x,), lambda g: (g * c,))


def add_const(x: Var, c: np.ndarray) -> Var:
    """``x + c`` where ``c`` broadcasts over leading axes only (used for attention masks)."""
    if c.shape != x.shape[-c.ndim:]:
        raise ShapeError(f"add_const: {c.shape} does not match trailing dims of {x.shape}")
    return _node(x.data + c, (x,), lambda g: (g,))


def reshape(x: Var, shape: Sequence[int]) -> Var:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(a: Var, b: Var) -> Var:
    """Concatenate along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: leading dims differ {a.shape} vs {b.shape}")
    k = a.shape[-1]
    return _node(np.concatenate([a.data, b.data], axis=-1), (a, b), lambda g: (g[..., :k], g[..., k:]))


def sum_all(x: Var) -> Var:
    src = x.shape
    return _node(np.asarray(x.data.sum(dtype=DTYPE)), (x,), lambda g: (np.full(src, g, dtype=DTYPE),))


def mean_all(x: Var) -> Var:
    src = x.shape
    n = DTYPE(x.data.size)
    return _node(np.asarray(x.data.mean(dtype=DTYPE)), (x,), lambda g: (np.full(src, g / n, dtype=DTYPE),))


# linear algebra -------------------------------------------------------------

def linear(x: Var, w: Var) -> Var:
    """``x[..., k] @ w[k, n]``; leading axes of ``x`` are flattened into rows."""
    k = x.shape[-1]
    if w.data.ndim != 2 or w.shape[0] != k:
        raise ShapeError(f"linear: {x.shape} x {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    out = T.matmul(x2, w.data).reshape(*lead, w.shape[1])
    wd = w.data

    def fn(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(*lead, k) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        return gx, gw

    return _node(out, (x, w), fn)


def bmm(a: Var, b: Var) -> Var:
    """Batched ``a[..., m, k] @ b[..., k, n]`` with identical leading dims."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2)) if a.requires_grad else None
        gb = np.matmul(ad.swapaxes(-1, -2), g) if b.requires_grad else None
        return ga, gb

    return _node(np.matmul(ad, bd), (a, b), fn)


# nonlinearities -------------------------------------------------------------

def softmax(x: Var) -> Var:
    y = T.softmax_rows(x.data)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), fn)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs d={d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = DTYPE(1.0) / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        ggain = (g2 * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), fn)


def gelu(x: Var) -> Var:
    xd = x.data
    return _node(T.gelu(xd), (x,), lambda g: (g * T.gelu_grad(xd),))


def relu(x: Var) -> Var:
    mask = (x.data > 0).astype(DTYPE)
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Var) -> Var:
    y = T.sigmoid(x.data)
    return _node(y, (x,), lambda g: (g * y * (DTYPE(1.0) - y),))


def embedding(table: Var, ids: np.ndarray) -> Var:
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"token id out of range [0, {v})")

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(table.data[ids], (table,), fn)


def cross_entropy(logits: Var, targets) -> Var:
    """Mean token NLL; ``logits`` is ``[n, V]``."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, V], got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for {n} rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target out of range [0, {v})")
    logp = T.log_softmax_rows(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, t].mean(dtype=DTYPE))

    def fn(g):
        p = np.exp(logp)
        p[rows, t] -= DTYPE(1.0)
        return (p * (g / DTYPE(n)),)

    return _node(loss, (logits,), fn)


def mse(pred: Var, target: np.ndarray) -> Var:
    if pred.shape != target.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = DTYPE(diff.size)
    return _node(np.asarray((diff * diff).mean(dtype=DTYPE)), (pred,), lambda g: (DTYPE(2.0) * diff * (g / n),))


# backward -------------------------------------------------------------------

def _topo(root: Var) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Var, wrt: Iterable[Var], upstream: np.ndarray | None = None,
             retain_graph: bool = False) -> list:
    """Gradients of ``output`` (seeded with ``upstream``) with respect to each of ``wrt``.

    The graph is released afterwards unless ``retain_graph``; a second call on
    a released graph raises :class:`StateError`.
    """
    wrt = list(wrt)
    wanted = {id(v) for v in wrt}
    if output.backward_fn is None and id(output) not in wanted:
        raise StateError("no recorded forward graph for this output")
    if upstream is None:
        if output.data.size != 1:
            raise ShapeError("upstream gradient required for non-scalar output")
        upstream = np.ones_like(output.data)
    else:
        upstream = np.asarray(upstream, dtype=DTYPE)
        if upstream.shape != output.shape:
            raise ShapeError(f"upstream {upstream.shape} vs output {output.shape}")

    grads = {id(output): upstream}
    found = {}
    for node in reversed(_topo(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wanted:
            found[id(node)] = g
        fn = node.backward_fn
        if fn is None:
            continue
        for p, pg in zip(node.parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        if not retain_graph:
            node.backward_fn = None
            node.parents = ()
    return [found.get(id(v), np.zeros_like(v.data)) for v in wrt]
