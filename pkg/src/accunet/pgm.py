"""Binary greyscale PGM (P5, maxval 255) reading and writing.

Files are written with the canonical header ``P5\\n<w> <h>\\n255\\n``; the
reader also accepts comments and arbitrary whitespace in the header.
"""

from __future__ import annotations

import os

import numpy as np


class PgmError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple:
    """Read ``count`` header tokens; return them and the offset of the pixel data."""
    out, i = [], 0
    while len(out) < count:
        if i >= len(buf):
            raise PgmError("truncated PGM header")
        c = buf[i:i + 1]
        if c == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
                j += 1
            out.append(buf[i:j])
            i = j
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise PgmError("PGM header must end with a single whitespace byte")
    return out, i + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic != b"P5":
        raise PgmError(f"not a binary PGM: magic {magic!r}, expected b'P5'")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PgmError("PGM width, height and maxval must be integers") from None
    if w < 1 or h < 1:
        raise PgmError(f"PGM dimensions must be positive, got {w}x{h}")
    if maxval != 255:
        raise PgmError(f"only maxval 255 is supported, got {maxval}")
    expected = w * h
    actual = len(buf) - offset
    if actual < expected:
        raise PgmError(f"truncated pixel data: expected {expected} bytes, got {actual}")
    if actual > expected:
        raise PgmError(f"trailing data after pixels: expected {expected} bytes, got {actual}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=expected, offset=offset)
    return (pixels.reshape(h, w) / np.float32(255)).astype(np.float32)


def encode_pgm(image: np.ndarray) -> bytes:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise PgmError(f"PGM images are 2-D, got shape {a.shape}")
    if not np.all((a >= 0) & (a <= 1)):
        raise PgmError("PGM pixel values must lie in [0, 1]")
    h, w = a.shape
    pixels = np.rint(a * 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def write_pgm(image: np.ndarray, path: str | os.PathLike) -> None:
    data = encode_pgm(image)
    with open(path, "wb") as fh:
        fh.write(data)
