"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

IGNORE_LABEL = 255


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    raster = np.frombuffer(data, dtype=np.uint8, count=size, offset=pos)
    if raster.size != size:
        raise ValueError(f"{path}: raster is shorter than {w}x{h}")
    return raster.reshape(h, w, channels) if channels == 3 else raster.reshape(h, w), h, w


def read_ppm(path) -> np.ndarray:
    """Image as an ``(H, W, 3)`` float64 grid in ``[0, 1]``."""
    raster, _, _ = _read_netpbm(path, b"P6")
    return raster.astype(np.float64) / 255.0


def write_ppm(path, image) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Label mask as an ``(H, W)`` int64 array."""
    raster, _, _ = _read_netpbm(path, b"P5")
    return raster.astype(np.int64)


def write_pgm(path, labels) -> None:
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("labels must fit in 8 bits")
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.astype(np.uint8).tobytes())
