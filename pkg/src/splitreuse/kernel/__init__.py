"""Deterministic fp32 kernels, random streams, autodiff and the optimizer."""

from .rng import Rng, gaussian
from .tensor import DTYPE, as_tensor, cross_entropy, layer_norm, matmul, softmax_rows

__all__ = ["DTYPE", "Rng", "as_tensor", "cross_entropy", "gaussian", "layer_norm", "matmul", "softmax_rows"]
