"""Netpbm dumps of camera frames for debugging."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    """Binary P6 from an (h, w, 3) array of reals in [0, 1]."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3), got {pixels.shape}")
    h, w, _ = pixels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + _to_u8(pixels).tobytes())


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary P5 from an (h, w) array of reals (or a bool mask) in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected (h, w), got {image.shape}")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _to_u8(image).tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    """Inverse of the writers above (u8 array); used by tests and tooling."""
    data = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    raster = data[m.end() :]
    if maxval != 255:
        raise ValueError("only 8-bit rasters are supported")
    channels = {b"P6": 3, b"P5": 1}[magic]
    arr = np.frombuffer(raster[: w * h * channels], dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)
