"""Binary PGM/PPM grids of image samples."""

import math
import re

import numpy as np

from .errors import ShapeMismatch


def _side_and_channels(dim):
    side = math.isqrt(dim)
    if side * side == dim:
        return side, 1
    if dim % 3 == 0:
        side = math.isqrt(dim // 3)
        if 3 * side * side == dim:
            return side, 3
    raise ShapeMismatch(f"dimension {dim} is neither a square grey image nor a square RGB image")


def to_pixels(samples, num_levels=256):
    """Map samples in [0, 1) to bytes, clamping anything outside."""
    pixels = np.floor(np.asarray(samples, dtype=float) * num_levels)
    return np.clip(np.nan_to_num(pixels, nan=0.0), 0, 255).astype(np.uint8)


def emit_grid(samples, rows, cols, path, num_levels=256):
    """Tile ``rows * cols`` flattened square images into one PGM (grey) or PPM (RGB) file.

    ``samples`` is ``(rows * cols, D)`` in the normalised [0, 1) range;
    colour images are stored channel-last.
    """
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] != rows * cols:
        raise ShapeMismatch(f"need {rows * cols} flattened samples, got shape {samples.shape}")
    side, channels = _side_and_channels(samples.shape[1])
    tiles = to_pixels(samples, num_levels).reshape(rows, cols, side, side, channels)
    grid = tiles.transpose(0, 2, 1, 3, 4).reshape(rows * side, cols * side, channels)
    magic = "P5" if channels == 1 else "P6"
    header = f"{magic} {cols * side} {rows * side} 255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + grid.tobytes())
    return grid if channels == 3 else grid[:, :, 0]


_HEADER = re.compile(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pnm(path):
    """Read a binary PGM/PPM written by :func:`emit_grid`; returns ``(magic, pixels)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    m = _HEADER.match(raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    magic, width, height = m.group(1).decode(), int(m.group(2)), int(m.group(3))
    channels = 1 if magic == "P5" else 3
    data = np.frombuffer(raw, dtype=np.uint8, offset=m.end())
    if data.size != width * height * channels:
        raise ValueError(f"{path}: pixel payload has the wrong size")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return magic, data.reshape(shape)
