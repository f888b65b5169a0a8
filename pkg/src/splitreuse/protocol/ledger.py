"""Byte accounting, the asymmetric-rate latency model, and the label-flow audit."""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass

from .wire import HEADER_SIZE, LABEL_TYPES, Message, MsgType

UPLINK_BPS = 30.6e6
DOWNLINK_BPS = 166.8e6

UP, DOWN = "up", "down"

# which gated interface each message type belongs to
INTERFACE_OF = {
    MsgType.ACTIVATION_UPLOAD: "f2s", MsgType.SKIP_NOTICE: None,
    MsgType.TRUNK_ACTIVATION_DOWN: "s2t", MsgType.TAIL_GRADIENT_UP: "t2s",
    MsgType.FRONT_GRADIENT_DOWN: "s2f", MsgType.GRADIENT_DOWN: "s2f",
}


@dataclass(frozen=True)
class Record:
    direction: str
    type: MsgType
    client_id: int
    epoch: int
    step: int
    seq: int                # per-(client, direction) sequence number within the step
    header_bytes: int
    payload_bytes: int
    interface: str = ""     # gated interface the payload belongs to, if any

    @property
    def total(self) -> int:
        return self.header_bytes + self.payload_bytes


class CommLedger:
    """Append-only message log; ``records()`` returns a schedule-independent canonical order."""

    FIELDS = ("epoch", "step", "client_id", "direction", "seq", "type", "interface", "header_bytes", "payload_bytes")

    def __init__(self):
        self._records: list = []
        self._seq: dict = {}
        self._lock = threading.Lock()

    def record(self, msg: Message, direction: str, interface: str = "") -> Record:
        with self._lock:
            k = (msg.client_id, direction, msg.epoch, msg.step)
            seq = self._seq.get(k, 0)
            self._seq[k] = seq + 1
            r = Record(direction, msg.type, msg.client_id, msg.epoch, msg.step, seq, HEADER_SIZE,
                       len(msg.payload), interface)
            self._records.append(r)
            return r

    def records(self) -> list:
        with self._lock:
            return sorted(self._records, key=lambda r: (r.epoch, r.step, r.client_id, r.direction, r.seq))

    def __len__(self):
        return len(self._records)

    def totals(self, epoch: int | None = None) -> dict:
        """``(direction, type name) -> {"count", "header", "payload"}``."""
        out: dict = {}
        for r in self.records():
            if epoch is not None and r.epoch != epoch:
                continue
            t = out.setdefault((r.direction, r.type.name), {"count": 0, "header": 0, "payload": 0})
            t["count"] += 1
            t["header"] += r.header_bytes
            t["payload"] += r.payload_bytes
        return out

    def bytes(self, direction: str | None = None, *, epoch: int | None = None, types=None,
              interface: str | None = None, payload_only: bool = False) -> int:
        n = 0
        for r in self._records:
            if direction is not None and r.direction != direction:
                continue
            if epoch is not None and r.epoch != epoch:
                continue
            if types is not None and r.type not in types:
                continue
            if interface is not None and r.interface != interface:
                continue
            n += r.payload_bytes if payload_only else r.total
        return n

    def interfaces(self) -> set:
        return {r.interface for r in self._records if r.interface}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        for r in self.records():
            w.writerow([r.epoch, r.step, r.client_id, r.direction, r.seq, r.type.name, r.interface,
                        r.header_bytes, r.payload_bytes])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CommLedger":
        led = cls()
        for row in csv.DictReader(io.StringIO(text)):
            led._records.append(Record(row["direction"], MsgType[row["type"]], int(row["client_id"]),
                                       int(row["epoch"]), int(row["step"]), int(row["seq"]),
                                       int(row["header_bytes"]), int(row["payload_bytes"]), row["interface"]))
        return led


def estimate_latency(ledger_or_bytes, up_bps: float = UPLINK_BPS, down_bps: float = DOWNLINK_BPS) -> dict:
    """Seconds spent on the wire. Accepts a ledger or an ``(up_bytes, down_bytes)`` pair."""
    if up_bps <= 0 or down_bps <= 0:
        raise ValueError("rates must be positive")
    if isinstance(ledger_or_bytes, CommLedger):
        up, down = ledger_or_bytes.bytes(UP), ledger_or_bytes.bytes(DOWN)
    else:
        up, down = ledger_or_bytes
    u, d = up * 8.0 / up_bps, down * 8.0 / down_bps
    return {"up_s": u, "down_s": d, "total_s": u + d}


@dataclass(frozen=True)
class AuditResult:
    passed: bool
    label_bytes_up: int
    label_messages_up: int
    topology: str


def label_flow_audit(ledger: CommLedger, topology: str) -> AuditResult:
    """Passes iff no client->server message carried labels. Standard topologies fail by design."""
    label_recs = [r for r in ledger.records() if r.direction == UP and r.type in LABEL_TYPES]
    n = sum(r.payload_bytes for r in label_recs)
    return AuditResult(not label_recs, n, len(label_recs), topology)
