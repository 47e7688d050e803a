"""Portable pixmap / graymap I/O with an exact quantised round trip.

Output format is binary PPM (magic ``P6``, maxval 255): header
``P6\\n<w> <h>\\n255\\n`` followed by h*w RGB byte triplets in row-major
order.  Values are clamped to [0, 1] and quantised by round(v * 255), so a
write-then-read reproduces the clamped, quantised values exactly.  Masks are
read from binary PGM (``P5``).
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DimensionError, LayoutError


def quantize(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantise to uint8."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(x0: np.ndarray, path: str | os.PathLike) -> None:
    """Write an h x w x 3 grid as binary PPM."""
    x0 = np.asarray(x0)
    if x0.ndim != 3 or x0.shape[2] != 3:
        raise DimensionError(f"PPM export needs an h x w x 3 grid, got {x0.shape}")
    if not np.isfinite(x0).all():
        raise LayoutError("cannot export non-finite values")
    h, w, _ = x0.shape
    data = quantize(x0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_netpbm(path: str | os.PathLike, magic: bytes) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(magic):
        raise LayoutError(f"{path}: expected {magic.decode()} file")
    # Header: magic, width, height, maxval as whitespace-separated tokens
    # (comment lines starting with '#' allowed), then a single whitespace
    # byte before the raster.
    tokens: list[int] = []
    i = len(magic)
    while len(tokens) < 3:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        tokens.append(int(raw[i:j]))
        i = j
    i += 1  # single whitespace separating header from raster
    w, h, maxval = tokens
    if maxval != 255:
        raise LayoutError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    raster = np.frombuffer(raw[i : i + h * w * channels], dtype=np.uint8)
    if raster.size != h * w * channels:
        raise LayoutError(f"{path}: truncated raster")
    return raster.reshape(h, w, channels).astype(np.float64) / 255.0


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PPM into an h x w x 3 float grid in [0, 1]."""
    return _read_netpbm(path, b"P6")


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM into an h x w float grid in [0, 1]."""
    return _read_netpbm(path, b"P5")[:, :, 0]


def default_out_dir() -> Path:
    """Output directory, overridable via the LAYERDIFF_OUT_DIR environment variable."""
    return Path(os.environ.get("LAYERDIFF_OUT_DIR", "."))
