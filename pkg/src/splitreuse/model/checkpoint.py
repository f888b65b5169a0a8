"""Binary tensor container used for checkpoints and adapter payloads.

Layout (all integers little-endian)::

    b"SCMD" | u32 version | u32 config_len | config (UTF-8 text) | u32 n_tensors |
    n_tensors x ( u16 name_len | name | u8 dtype | u8 ndim | ndim x u32 dims | raw data )

dtype codes: 0 = float32, 1 = int32, 2 = int8.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import ProtocolError

MAGIC = b"SCMD"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("i1")}
_CODES = {np.dtype("float32"): 0, np.dtype("int32"): 1, np.dtype("int8"): 2}


def encode_container(tensors: dict, config_text: str = "") -> bytes:
    buf = io.BytesIO()
    cfg = config_text.encode("utf-8")
    buf.write(MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg + struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ProtocolError(f"unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def decode_container(data: bytes):
    """Returns ``(tensors, config_text)``."""
    mv = memoryview(data)
    if bytes(mv[:4]) != MAGIC:
        raise ProtocolError("bad container magic")
    version, clen = struct.unpack_from("<II", mv, 4)
    if version != VERSION:
        raise ProtocolError(f"unsupported container version {version}")
    off = 12
    config_text = bytes(mv[off:off + clen]).decode("utf-8")
    off += clen
    (count,) = struct.unpack_from("<I", mv, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", mv, off)
        off += 2
        name = bytes(mv[off:off + nlen]).decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", mv, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", mv, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(mv[off:off + nbytes], dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        off += nbytes
    if off != len(data):
        raise ProtocolError(f"{len(data) - off} trailing bytes in container")
    return tensors, config_text


def save_checkpoint(path, tensors: dict, config_text: str = "") -> None:
    Path(path).write_bytes(encode_container(tensors, config_text))


def load_checkpoint(path):
    return decode_container(Path(path).read_bytes())
