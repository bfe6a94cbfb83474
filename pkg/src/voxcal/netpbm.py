"""Binary Netpbm readers/writers (P5 grayscale, P6 RGB).

16-bit samples are big-endian, as the Netpbm format requires.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _read_header(buf: bytes) -> tuple[bytes, list[int], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while buf[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens[0], [int(t) for t in tokens[1:]], pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file into an (H, W) or (H, W, 3) uint8/uint16 array."""
    buf = Path(path).read_bytes()
    magic, (width, height, maxval), offset = _read_header(buf)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    arr = arr.astype(np.uint16 if maxval > 255 else np.uint8)
    return arr.reshape((height, width, 3) if channels == 3 else (height, width))


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {image.shape}")
    if image.dtype == np.uint16:
        maxval, raw = 65535, image.astype(">u2").tobytes()
    elif image.dtype == np.uint8:
        maxval, raw = 255, image.tobytes()
    else:
        raise TypeError(f"PGM needs uint8 or uint16, got {image.dtype}")
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + raw)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"PPM needs (H, W, 3) uint8, got {image.shape} {image.dtype}")
    h, w, _ = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())
