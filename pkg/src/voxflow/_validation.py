"""Small input-validation helpers shared across modules."""

from __future__ import annotations

import numpy as np


def check_points(points) -> np.ndarray:
    """Coerce to a contiguous (n, 3) float64 array of finite points."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must have shape (n, 3)")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


def check_volume(volume) -> np.ndarray:
    """Coerce to a 3D float array."""
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError("volume must be a 3D array")
    return vol


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
