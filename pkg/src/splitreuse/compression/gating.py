"""Similarity gate with sender comparison caches and receiver reuse caches.

The sender keeps a compressed copy of the last tensor it actually transmitted
for each key; the receiver keeps the full tensor it received. A new tensor is
sent only when its similarity to the cached comparison entry drops below the
threshold; otherwise the receiver reuses its cached copy.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import ProtocolError, ShapeError
from ..kernel.rng import Rng
from ..kernel.tensor import DTYPE

INTERFACES = ("f2s", "s2t", "t2s", "s2f")


def cosine(x, y) -> float:
    """Cosine similarity clamped to [-1, 1]; 0.0 when both vectors are zero."""
    x = np.asarray(x, dtype=DTYPE).ravel()
    y = np.asarray(y, dtype=DTYPE).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"cosine: lengths differ {x.size} vs {y.size}")
    x64, y64 = x.astype(np.float64), y.astype(np.float64)
    nx, ny = np.sqrt(x64 @ x64), np.sqrt(y64 @ y64)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(min(1.0, max(-1.0, (x64 @ y64) / (nx * ny))))


def default_projection_dim(d_in: int) -> int:
    return max(16, d_in // 4)


class ProjectionMatrix:
    """Gaussian random projection ``P[d_in, d_out]`` with entries ``N(0, 1/d_out)``; fixed for a run."""

    def __init__(self, d_in: int, d_out: int, seed: int, interface: str = ""):
        self.d_in, self.d_out, self.seed, self.interface = int(d_in), int(d_out), int(seed), interface
        g = Rng(seed, "rp", interface).gaussian((self.d_in, self.d_out))
        self.P = g * DTYPE(1.0 / np.sqrt(self.d_out))
        self.P.setflags(write=False)


def project(P: ProjectionMatrix, x) -> np.ndarray:
    """Flatten ``x`` and map it to ``d_out`` dims."""
    v = np.asarray(x, dtype=DTYPE).reshape(-1)
    if v.size != P.d_in:
        raise ShapeError(f"project: input has {v.size} elements, projection expects {P.d_in}")
    return v @ P.P


@dataclass(frozen=True)
class CacheKey:
    client_id: int
    sample_id: int
    interface: str


class Decision(Enum):
    SEND = "send"
    REUSE = "reuse"


@dataclass(frozen=True)
class GateResult:
    decision: Decision
    similarity: float | None   # None when there was nothing to compare against


class ComparisonCache:
    """Sender side: ``CacheKey -> compressed vector``."""

    def __init__(self):
        self.entries: dict = {}
        self._pending: set = set()

    def __len__(self):
        return len(self.entries)

    def get(self, key):
        return self.entries.get(key)

    def nbytes(self) -> int:
        return sum(v.nbytes for v in self.entries.values())


class ReuseCache:
    """Receiver side: ``CacheKey -> full tensor`` as received."""

    def __init__(self):
        self.entries: dict = {}

    def __len__(self):
        return len(self.entries)

    def get(self, key):
        return self.entries.get(key)

    def nbytes(self) -> int:
        return sum(v.nbytes for v in self.entries.values())


def gate(sender_cache: ComparisonCache, key: CacheKey, current_compressed, theta: float,
         force_send: bool = False) -> GateResult:
    """Send iff forced, no cached entry, or similarity < theta (ties reuse).

    A Send leaves the key pending; the cache itself is written by :func:`commit_transmission`.
    """
    cached = sender_cache.entries.get(key)
    if cached is None:
        sender_cache._pending.add(key)
        return GateResult(Decision.SEND, None)
    s = cosine(current_compressed, cached)
    if force_send or s < theta:
        sender_cache._pending.add(key)
        return GateResult(Decision.SEND, s)
    return GateResult(Decision.REUSE, s)


def commit_transmission(sender_cache: ComparisonCache, receiver_cache: ReuseCache, key: CacheKey,
                        full_tensor, compressed) -> None:
    """Record a completed transmission on both sides.

    ``full_tensor`` is what the receiver got (dequantized if the wire was INT8) and
    ``compressed`` must be its projection, so both caches describe the same tensor.
    """
    if key not in sender_cache._pending:
        raise ProtocolError(f"commit for {key} without a matching Send decision")
    sender_cache._pending.discard(key)
    sender_cache.entries[key] = np.array(compressed, dtype=DTYPE, copy=True)
    receiver_cache.entries[key] = np.array(full_tensor, dtype=DTYPE, copy=True)


def cache_memory_report(caches: dict) -> dict:
    """Bytes held per party. ``caches`` maps party name to an iterable of caches."""
    return {party: int(sum(c.nbytes() for c in cs)) for party, cs in caches.items()}
