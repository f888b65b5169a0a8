"""AdamW with global-norm clipping and a warm-up/linear-decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, TrainingError
from .tensor import DTYPE


@dataclass
class LinearSchedule:
    """Linear warm-up from 0 to ``peak_lr`` over ``warmup_frac`` of ``total_steps``, then linear decay to 0."""

    peak_lr: float
    total_steps: int
    warmup_frac: float = 0.5

    def __call__(self, step: int) -> float:
        total = max(int(self.total_steps), 1)
        warm = int(round(self.warmup_frac * total))
        if step < warm:
            return self.peak_lr * step / warm
        if total == warm:
            return self.peak_lr
        return self.peak_lr * max(total - step, 0) / (total - warm)


@dataclass
class ConstantSchedule:
    lr: float

    def __call__(self, step: int) -> float:
        return self.lr


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64))) for g in grads)))


def clip_by_global_norm(grads, max_norm: float):
    """Return ``(clipped, pre_clip_norm)``. Grads are scaled only when the norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm {norm}")
    if max_norm is None or norm <= max_norm:
        return list(grads), norm
    factor = DTYPE(max_norm / (norm + 1e-12))
    return [g * factor for g in grads], norm


@dataclass
class AdamW:
    """Optimizer state for a fixed list of parameter arrays (updated in place)."""

    schedule: object
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def lr(self) -> float:
        return float(self.schedule(self.step_count))

    def step(self, params, grads) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} params but {len(grads)} grads")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"grad {g.shape} does not match param {p.shape}")
        for g in grads:
            if not np.isfinite(g).all():
                raise TrainingError("NaN/Inf in gradient")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        lr = DTYPE(self.lr())
        self.step_count += 1
        t = self.step_count
        b1, b2 = DTYPE(self.beta1), DTYPE(self.beta2)
        c1 = DTYPE(1.0 - self.beta1 ** t)
        c2 = DTYPE(1.0 - self.beta2 ** t)
        wd = DTYPE(self.weight_decay)
        eps = DTYPE(self.eps)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (DTYPE(1.0) - b1) * g
            v *= b2
            v += (DTYPE(1.0) - b2) * (g * g)
            if lr == 0:
                continue
            if wd:
                p -= lr * wd * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        return norm

    def state_arrays(self) -> dict:
        out = {"step": np.asarray([self.step_count], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out
