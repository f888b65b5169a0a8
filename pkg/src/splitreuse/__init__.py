"""Split federated LoRA fine-tuning with similarity-gated reuse of cut-layer tensors."""

__version__ = "0.1.0"
