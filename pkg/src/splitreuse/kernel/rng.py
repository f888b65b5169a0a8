"""Counter-based random streams.

Each :class:`Rng` wraps a Philox-4x64 counter generator. Child streams are
derived by hashing ``(seed, *keys)`` through ``numpy.random.SeedSequence``, so
a stream for e.g. ``("dropout", epoch, step, client)`` can be reconstructed
anywhere without replaying the parent.

Normal variates use Box-Muller on 53-bit uniforms taken from the raw 64-bit
counter output::

    u = ((raw >> 11) + 0.5) * 2**-53          # open interval (0, 1)
    z0 = sqrt(-2 ln u1) * cos(2 pi u2)
    z1 = sqrt(-2 ln u1) * sin(2 pi u2)

computed in float64 and rounded to float32.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_int(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & _MASK64


class Rng:
    """Single-owner random stream; not safe for concurrent use."""

    def __init__(self, seed: int, *keys):
        self.seed = int(seed) & _MASK64
        self.keys = tuple(keys)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32] + [_key_int(k) for k in keys]
        state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)
        self._bitgen = np.random.Philox(key=state)

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(int(n)).astype(np.uint64)

    def uniform(self, dims: Sequence[int] | int) -> np.ndarray:
        """Float64 uniforms in (0, 1)."""
        shape = (dims,) if isinstance(dims, int) else tuple(dims)
        n = int(np.prod(shape)) if shape else 1
        r = self.raw(n)
        u = ((r >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)
        return u.reshape(shape)

    def gaussian(self, dims: Sequence[int] | int) -> np.ndarray:
        shape = (dims,) if isinstance(dims, int) else tuple(dims)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = u[0::2], u[1::2]
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m, dtype=np.float64)
        z[0::2] = rad * np.cos(2.0 * np.pi * u2)
        z[1::2] = rad * np.sin(2.0 * np.pi * u2)
        return z[:n].astype(np.float32).reshape(shape)

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in ``[0, high)`` (float-scaled, bias below 2**-40 for small ``high``)."""
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n, dtype=np.int64)
        u = self.uniform(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def gaussian(rng: Rng, dims: Sequence[int] | int) -> np.ndarray:
    return rng.gaussian(dims)
