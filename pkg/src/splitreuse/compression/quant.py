"""Per-tensor symmetric INT8 codec for wire payloads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..kernel.tensor import DTYPE


@dataclass
class QuantizedTensor:
    dims: tuple
    scale: np.float32
    codes: np.ndarray   # int8, same dims

    @property
    def nbytes(self) -> int:
        return 4 + self.codes.size


def quantize_int8(x) -> QuantizedTensor:
    """``scale = max|x| / 127`` (1 for an all-zero tensor), zero-point 0, round half to even."""
    x = np.asarray(x, dtype=DTYPE)
    amax = float(np.abs(x).max()) if x.size else 0.0
    scale = DTYPE(amax / 127.0) if amax > 0 else DTYPE(1.0)
    # divide in float64 so the nearest code is chosen exactly (fp32 division can round across a half step)
    codes = np.clip(np.rint(x.astype(np.float64) / np.float64(scale)), -127, 127).astype(np.int8)
    return QuantizedTensor(tuple(x.shape), scale, codes)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.codes.astype(DTYPE) * q.scale
