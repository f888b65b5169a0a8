from .gating import (
    INTERFACES,
    CacheKey,
    ComparisonCache,
    Decision,
    GateResult,
    ProjectionMatrix,
    ReuseCache,
    cache_memory_report,
    commit_transmission,
    cosine,
    default_projection_dim,
    gate,
    project,
)
from .quant import QuantizedTensor, dequantize, quantize_int8

__all__ = [
    "INTERFACES", "CacheKey", "ComparisonCache", "Decision", "GateResult", "ProjectionMatrix", "QuantizedTensor",
    "ReuseCache", "cache_memory_report", "commit_transmission", "cosine", "default_projection_dim", "dequantize",
    "gate", "project", "quantize_int8",
]
