"""Binary framing and payload codecs for every message exchanged between parties.

Frame: ``b"SFC1" | type u8 | client_id u16 | epoch u32 | step u32 | payload_len u64 | payload``
(all little-endian; 23-byte header).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ..compression.quant import QuantizedTensor, dequantize, quantize_int8
from ..errors import ProtocolError, ShapeError
from ..kernel.tensor import DTYPE

MAGIC = b"SFC1"
_HEADER = struct.Struct("<4sBHIIQ")
HEADER_SIZE = _HEADER.size


class MsgType(IntEnum):
    ACTIVATION_UPLOAD = 0x01
    SKIP_NOTICE = 0x02
    GRADIENT_DOWN = 0x03
    GRADIENT_SKIP = 0x04
    ADAPTER_UPLOAD = 0x05
    ADAPTER_BROADCAST = 0x06
    TRUNK_ACTIVATION_DOWN = 0x07
    TAIL_GRADIENT_UP = 0x08
    FRONT_GRADIENT_DOWN = 0x09
    LABEL_BLOCK = 0x0A
    EVAL = 0x0B
    SESSION_HELLO = 0x0C


# message types whose payload is a label field
LABEL_TYPES = frozenset({MsgType.LABEL_BLOCK})


@dataclass(frozen=True)
class Message:
    type: MsgType
    client_id: int
    epoch: int
    step: int
    payload: bytes

    @property
    def nbytes(self) -> int:
        return HEADER_SIZE + len(self.payload)


def encode_frame(msg: Message) -> bytes:
    return _HEADER.pack(MAGIC, int(msg.type), msg.client_id, msg.epoch, msg.step, len(msg.payload)) + msg.payload


def decode_header(buf: bytes):
    """``(type, client_id, epoch, step, payload_len)`` from the first ``HEADER_SIZE`` bytes."""
    if len(buf) < HEADER_SIZE:
        raise ProtocolError("truncated frame header")
    magic, t, cid, ep, st, n = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    try:
        t = MsgType(t)
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{t:02x}") from None
    return t, cid, ep, st, n


def decode_frame(buf: bytes) -> Message:
    t, cid, ep, st, n = decode_header(buf)
    if len(buf) != HEADER_SIZE + n:
        raise ProtocolError(f"frame length {len(buf)} does not match header ({HEADER_SIZE} + {n})")
    return Message(t, cid, ep, st, bytes(buf[HEADER_SIZE:]))


# tensor payloads ------------------------------------------------------------------------

DT_F32, DT_I32, DT_I8Q = 0, 1, 2


def encode_tensor(x, quantize: bool = False) -> bytes:
    """``dtype u8 | ndim u8 | dims u32... | [scale f32] | data``."""
    if quantize:
        q = x if isinstance(x, QuantizedTensor) else quantize_int8(x)
        dims = q.dims
        head = struct.pack("<BB", DT_I8Q, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
        return head + struct.pack("<f", float(q.scale)) + q.codes.astype(np.int8).tobytes()
    a = np.asarray(x)
    if a.dtype.kind in "iu":
        code, a = DT_I32, a.astype("<i4")
    else:
        code, a = DT_F32, a.astype("<f4")
    return struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def decode_tensor(buf, offset: int = 0):
    """Returns ``(array, next_offset)``; INT8 payloads come back dequantized to fp32."""
    code, ndim = struct.unpack_from("<BB", buf, offset)
    offset += 2
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    n = int(np.prod(dims)) if ndim else 1
    if code == DT_I8Q:
        (scale,) = struct.unpack_from("<f", buf, offset)
        offset += 4
        codes = np.frombuffer(buf, dtype=np.int8, count=n, offset=offset).reshape(dims)
        return dequantize(QuantizedTensor(tuple(dims), DTYPE(scale), codes)), offset + n
    if code == DT_F32:
        a = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(dims).astype(DTYPE)
        return a, offset + 4 * n
    if code == DT_I32:
        a = np.frombuffer(buf, dtype="<i4", count=n, offset=offset).reshape(dims).astype(np.int64)
        return a, offset + 4 * n
    raise ProtocolError(f"unknown tensor dtype code {code}")


# per-sample tensor lists ------------------------------------------------------------------

def encode_rows(rows: dict, quantize: bool = False) -> bytes:
    """``count u16 | (batch_pos u16 | tensor)...`` for ``{batch_pos: tensor}`` in ascending position."""
    out = [struct.pack("<H", len(rows))]
    for pos in sorted(rows):
        out.append(struct.pack("<H", pos))
        out.append(encode_tensor(rows[pos], quantize))
    return b"".join(out)


def decode_rows(buf: bytes) -> dict:
    (count,) = struct.unpack_from("<H", buf, 0)
    off, rows = 2, {}
    for _ in range(count):
        (pos,) = struct.unpack_from("<H", buf, off)
        rows[pos], off = decode_tensor(buf, off + 2)
    if off != len(buf):
        raise ProtocolError("trailing bytes after row list")
    return rows


def encode_bitmap(batch_size: int, positions) -> bytes:
    """``batch_size u16 | ceil(batch/8) bytes``, bit ``i`` set when position ``i`` is listed."""
    bits = np.zeros(batch_size, dtype=np.uint8)
    bits[list(positions)] = 1
    return struct.pack("<H", batch_size) + np.packbits(bits, bitorder="little").tobytes()


def decode_bitmap(buf: bytes) -> list:
    (n,) = struct.unpack_from("<H", buf, 0)
    if len(buf) != 2 + (n + 7) // 8:
        raise ProtocolError("bitmap length mismatch")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, offset=2), bitorder="little")[:n]
    return [int(i) for i in np.flatnonzero(bits)]


def check_rows_shape(rows: dict, dims) -> None:
    for pos, a in rows.items():
        if tuple(a.shape) != tuple(dims):
            raise ShapeError(f"row {pos}: expected {tuple(dims)}, got {a.shape}")
