from .checkpoint import decode_container, encode_container, load_checkpoint, save_checkpoint
from .transformer import (
    DropoutKey,
    LoraAdapterSet,
    ModelConfig,
    Segment,
    SplitModel,
    backward_segment,
    build_model,
    forward_frontend,
    forward_server_with_loss,
    forward_tail_and_loss,
    forward_trunk,
    mean_nll,
)

__all__ = [
    "DropoutKey", "LoraAdapterSet", "ModelConfig", "Segment", "SplitModel", "backward_segment", "build_model",
    "decode_container", "encode_container", "forward_frontend", "forward_server_with_loss",
    "forward_tail_and_loss", "forward_trunk", "load_checkpoint", "mean_nll", "save_checkpoint",
]
