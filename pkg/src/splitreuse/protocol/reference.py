"""Unsplit training with no protocol: the equivalence target for the always-send configuration.

The whole model runs as one graph per (client, step). Batching, dropout keys,
the client/server optimizer split and FedAvg cadence match the split engine so
that both produce the same numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..federation import fedavg
from ..harness.config import RunConfig
from ..kernel import autodiff as ad
from ..model.transformer import DropoutKey, SplitModel, full_forward_loss, mean_nll
from .engine import World, merge_adapters


@dataclass
class ReferenceResult:
    losses: list = field(default_factory=list)          # per epoch, per client, per step
    val_ppl: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)       # per epoch: {name: array} of global adapters


def run_reference(cfg: RunConfig) -> ReferenceResult:
    """Standard-topology layout only (loss on the server side)."""
    w = World(replace(cfg, gating=False))
    w.network.close()
    res = ReferenceResult()
    for epoch in range(1, w.cfg.epochs + 1):
        losses = [[] for _ in range(w.K)]
        for step in range(w.steps_per_epoch):
            for i, c in enumerate(w.clients):
                ids = w.batch_ids(i, epoch, step)
                data = w.corpus.train[ids]
                model = SplitModel(w.mcfg, w.base, merge_adapters(c.adapters, w.server_adapters[i]))
                loss, _, AD = full_forward_loss(model, data[:, :-1], data[:, 1:], DropoutKey(w.cfg.seed, epoch, step, i))
                names = list(AD)
                grads = dict(zip(names, ad.backward(loss, [AD[n] for n in names])))
                w.server_opts[i].step([w.server_adapters[i][n] for n in w.server_names],
                                      [grads[n] for n in w.server_names])
                cn = c.adapters.names()
                c.opt.step([c.adapters[n] for n in cn], [grads[n] for n in cn])
                losses[i].append(float(loss.data))
            w.global_step += 1
            if w.global_step % w.agg_interval == 0:
                g = fedavg([c.adapters for c in w.clients], w.weights)
                for c in w.clients:
                    c.adapters.assign(g)
                if w.cfg.server_adapters == "per_client":
                    gs = fedavg(w.server_adapters, w.weights)
                    for s in w.server_adapters:
                        s.assign(gs)
        glob = w.global_adapters()
        val = w.corpus.val
        res.val_ppl.append(math.exp(mean_nll(SplitModel(w.mcfg, w.base, glob), val[:, :-1], val[:, 1:])))
        res.losses.append(losses)
        res.snapshots.append({k: np.array(v, copy=True) for k, v in glob.tensors.items()})
    return res
