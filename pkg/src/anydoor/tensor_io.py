"""Flat binary tensor format ("TCT1").

Layout: magic ``b"TCT1"``, rank as little-endian u32, one u32 per dim, then
the row-major little-endian float32 payload.
"""

import io
import struct

import numpy as np

MAGIC = b"TCT1"


class TensorFormatError(ValueError):
    pass


def tensor_to_bytes(array) -> bytes:
    a = np.asarray(array, dtype="<f4", order="C")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def write_tensor(fp, array) -> int:
    blob = tensor_to_bytes(array)
    fp.write(blob)
    return len(blob)


def read_tensor(fp) -> np.ndarray:
    start = fp.tell() if fp.seekable() else 0
    magic = fp.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r} at byte {start}")
    raw = fp.read(4)
    if len(raw) < 4:
        raise TensorFormatError(f"truncated rank at byte {start + 4}")
    (rank,) = struct.unpack("<I", raw)
    raw = fp.read(4 * rank)
    if len(raw) < 4 * rank:
        raise TensorFormatError(f"truncated shape at byte {start + 8}")
    shape = struct.unpack(f"<{rank}I", raw)
    n = int(np.prod(shape, dtype=np.int64))
    payload = fp.read(4 * n)
    if len(payload) < 4 * n:
        raise TensorFormatError(f"truncated payload at byte {start + 8 + 4 * rank + len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))
