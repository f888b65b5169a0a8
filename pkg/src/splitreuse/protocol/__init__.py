"""Wire protocol, byte ledger, transports and the split-federated training engine."""

from .engine import EpochReport, World, assemble_server_batch, check_cache_coherence, run_epoch
from .ledger import CommLedger, estimate_latency, label_flow_audit
from .wire import Message, MsgType, decode_frame, encode_frame

__all__ = [
    "CommLedger", "EpochReport", "Message", "MsgType", "World", "assemble_server_batch", "check_cache_coherence",
    "decode_frame", "encode_frame", "estimate_latency", "label_flow_audit", "run_epoch",
]
