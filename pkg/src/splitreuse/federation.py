"""FedAvg over LoRA adapter sets and the broadcast that follows it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .kernel.tensor import DTYPE
from .model.checkpoint import decode_container, encode_container
from .model.transformer import LoraAdapterSet


@dataclass(frozen=True)
class AggregationConfig:
    interval: int                 # M, local steps between aggregations
    weights: tuple                # |D_i| / |D|

    def validate(self) -> "AggregationConfig":
        if self.interval < 1:
            raise ConfigError("aggregation interval must be >= 1")
        check_weights(self.weights)
        return self


def check_weights(weights) -> None:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError(f"weights must be non-negative and sum to 1 (got sum {w.sum() if w.size else 0})")


def fedavg(adapter_sets: Sequence[LoraAdapterSet], weights) -> LoraAdapterSet:
    """Weighted elementwise mean of every tensor, accumulated in float64.

    Client order is fixed by the input, so the result does not depend on scheduling.
    Identical inputs come back unchanged.
    """
    if len(adapter_sets) == 0:
        raise ShapeError("fedavg needs at least one adapter set")
    check_weights(weights)
    if len(weights) != len(adapter_sets):
        raise ShapeError(f"{len(adapter_sets)} adapter sets but {len(weights)} weights")
    ref = adapter_sets[0]
    for s in adapter_sets[1:]:
        if s.names() != ref.names() or any(s[n].shape != ref[n].shape for n in ref.names()):
            raise ShapeError("adapter sets differ structurally")
    out = {}
    for name in ref.names():
        first = ref[name]
        if all(np.array_equal(s[name], first) for s in adapter_sets[1:]):
            out[name] = first.copy()
            continue
        acc = np.zeros(first.shape, dtype=np.float64)
        lo = hi = first
        for s, w in zip(adapter_sets, weights):
            acc += float(w) * s[name].astype(np.float64)
            lo, hi = np.minimum(lo, s[name]), np.maximum(hi, s[name])
        # weights may miss 1 by up to 1e-9; keep every coordinate inside the clients' range
        out[name] = np.clip(acc.astype(DTYPE), lo, hi)
    return LoraAdapterSet(out)


def encode_adapters(adapters: LoraAdapterSet) -> bytes:
    return encode_container(adapters.tensors)


def decode_adapters(payload: bytes) -> LoraAdapterSet:
    tensors, _ = decode_container(payload)
    return LoraAdapterSet(tensors)


def broadcast(global_adapters: LoraAdapterSet, client_adapters: Sequence[LoraAdapterSet], network=None,
              epoch: int = 0, step: int = 0) -> None:
    """Overwrite every client's adapters with the global set.

    With a ``network``, one AdapterBroadcast per client goes over its downlink and
    the client installs the decoded copy.
    """
    from .protocol.wire import Message, MsgType
    payload = encode_adapters(global_adapters)
    for i, local in enumerate(client_adapters):
        if network is None:
            local.assign(global_adapters)
            continue
        msg = network.links[i].transfer(Message(MsgType.ADAPTER_BROADCAST, i, epoch, step, payload), "down")
        local.assign(decode_adapters(msg.payload))
