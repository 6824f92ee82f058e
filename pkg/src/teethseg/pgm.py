"""Binary PGM (P5, maxval 255) reader and writer."""

from __future__ import annotations

import os

import numpy as np

MAGIC = b"P5"
WHITESPACE = b" \t\r\n\x0b\x0c"


class PGMError(ValueError):
    pass


def encode_pgm(values) -> bytes:
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.size == 0:
        raise PGMError(f"PGM needs a non-empty 2-d array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        rounded = np.rint(np.asarray(arr, dtype=np.float64))
        if not np.isfinite(rounded).all() or rounded.min() < 0 or rounded.max() > 255:
            raise PGMError("PGM values must lie in [0, 255] after rounding")
        arr = rounded.astype(np.uint8)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    """Parse a P5 image into an (H, W) uint8 array."""
    if buf[:2] != MAGIC:
        raise PGMError(f"bad magic {buf[:2]!r} at byte offset 0, expected {MAGIC!r}")
    pos = 2
    if buf[pos : pos + 1] not in WHITESPACE or pos >= len(buf):
        raise PGMError(f"expected whitespace after magic at byte offset {pos}")
    tokens = []
    while len(tokens) < 3:
        if pos >= len(buf):
            raise PGMError(f"header truncated at byte offset {pos}")
        ch = buf[pos : pos + 1]
        if ch == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise PGMError(f"unterminated header comment at byte offset {pos}")
            pos = nl + 1
            continue
        if ch in WHITESPACE:
            pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1] not in WHITESPACE and buf[pos : pos + 1] != b"#":
            pos += 1
        tok = buf[start:pos]
        if not tok.isdigit():
            raise PGMError(f"malformed header field {tok!r} at byte offset {start}")
        tokens.append((int(tok), start))
    if pos >= len(buf) or buf[pos : pos + 1] not in WHITESPACE:
        raise PGMError(f"missing whitespace after maxval at byte offset {pos}")
    pos += 1
    (w, w_off), (h, h_off), (maxval, m_off) = tokens
    if w < 1 or h < 1:
        raise PGMError(f"invalid extents {w}x{h} at byte offset {w_off if w < 1 else h_off}")
    if maxval != 255:
        raise PGMError(f"unsupported maxval {maxval} at byte offset {m_off}, expected 255")
    payload = buf[pos:]
    expected = w * h
    if len(payload) != expected:
        kind = "truncated" if len(payload) < expected else "oversized"
        raise PGMError(f"{kind} payload at byte offset {pos}: expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | os.PathLike, values) -> None:
    with open(path, "wb") as f:
        f.write(encode_pgm(values))


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pgm(f.read())
