"""Produce a "pre-trained" frozen base by full-parameter training on a separate corpus."""

from __future__ import annotations

import numpy as np

from ..kernel import autodiff as ad
from ..kernel.optim import AdamW, LinearSchedule
from ..kernel.rng import Rng
from .transformer import LoraAdapterSet, SplitModel, full_forward_loss


def pretrain_base(model: SplitModel, tokens: np.ndarray, *, steps: int = 300, batch_size: int = 32,
                  lr: float = 3e-3, seed: int = 0) -> SplitModel:
    """Train every base weight for ``steps`` minibatches, then return a model whose base is frozen.

    ``tokens`` is ``[N, seq_len + 1]``; the adapters of ``model`` are kept unchanged.
    """
    base = {k: v.copy() for k, v in model.base.items()}
    bare = SplitModel(model.config, base, LoraAdapterSet({}))
    names = list(base)
    opt = AdamW(LinearSchedule(lr, steps, warmup_frac=0.1), weight_decay=0.0, clip_norm=1.0)
    rng = Rng(seed, "pretrain")
    n = tokens.shape[0]
    for step in range(steps):
        idx = rng.child(step).integers(n, batch_size)
        batch = tokens[idx]
        loss, P, _ = full_forward_loss(bare, batch[:, :-1], batch[:, 1:], train_base=True)
        grads = ad.backward(loss, [P[k] for k in names])
        opt.step([base[k] for k in names], grads)
    for v in base.values():
        v.setflags(write=False)
    return SplitModel(model.config, base, model.adapters)
