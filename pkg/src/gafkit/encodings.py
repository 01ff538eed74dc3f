"""Sinusoidal location and temporal encodings shared by the pretext heads."""

from __future__ import annotations

import numpy as np

# Normalized coordinates are stretched so one encoding period spans roughly a
# patch width at the default 64-pixel resolution.
LOCATION_SCALE = 64.0


def sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    """Classic transformer sin/cos features: even slots sin, odd slots cos.

    ``positions`` may have any shape; the result appends a ``dim`` axis.
    """
    if dim % 2 != 0:
        raise ValueError(f"encoding dim must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    i = np.arange(dim // 2, dtype=np.float64)
    angles = pos / (10000.0 ** (2.0 * i / dim))
    out = np.empty(pos.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out.astype(np.float32)


def location_encoding(center: tuple[float, float], dim: int, width: float,
                      height: float) -> np.ndarray:
    """Encode an (x, y) pixel location: first half encodes x, second half y."""
    x, y = float(center[0]), float(center[1])
    if not (0.0 <= x <= width and 0.0 <= y <= height):
        raise ValueError(f"center ({x}, {y}) outside the {width}x{height} frame")
    if dim % 4 != 0:
        raise ValueError(f"location encoding dim must be divisible by 4, got {dim}")
    return location_encoding_batch(np.array([[x, y]]), dim, width, height)[0]


def location_encoding_batch(centers: np.ndarray, dim: int, width: float,
                            height: float) -> np.ndarray:
    """Vectorized :func:`location_encoding` over ``(..., 2)`` center arrays."""
    if dim % 4 != 0:
        raise ValueError(f"location encoding dim must be divisible by 4, got {dim}")
    centers = np.asarray(centers, dtype=np.float64)
    half = dim // 2
    x = sinusoid(LOCATION_SCALE * centers[..., 0] / width, half)
    y = sinusoid(LOCATION_SCALE * centers[..., 1] / height, half)
    return np.concatenate([x, y], axis=-1)


def temporal_encoding(t: int | np.ndarray, dim: int) -> np.ndarray:
    """Standard 1D sinusoidal encoding of a frame index over all ``dim`` slots."""
    return sinusoid(t, dim)
