"""Binary PPM (P6, maxval 255) reading and writing."""

from pathlib import Path

import numpy as np


class PPMError(ValueError):
    pass


def _read_token(buf: bytes, pos: int):
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMError(f"malformed header: unexpected end of data at byte {start}")
    return buf[start:pos], start, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise PPMError("malformed header: magic is not P6 at byte 0")
    pos = 2
    fields = []
    for _ in range(3):
        tok, start, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PPMError(f"malformed header: expected integer at byte {start}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval} at byte {start}; only 8-bit PPM is handled")
    if w < 1 or h < 1:
        raise PPMError(f"malformed header: zero image dimension at byte {start}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMError(f"malformed header: missing separator at byte {pos}")
    pos += 1
    need = w * h * 3
    data = buf[pos : pos + need]
    if len(data) < need:
        raise PPMError(f"truncated payload at byte {pos + len(data)}: expected {need} bytes")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return (arr.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def encode_ppm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    # round half up
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + q.tobytes()


def load_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_ppm(path, image) -> None:
    Path(path).write_bytes(encode_ppm(image))
