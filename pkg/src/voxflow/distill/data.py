"""Toy 2D distributions for distillation experiments."""

from __future__ import annotations

import numpy as np

GMM8_SIGMA = 0.05
NUM_CLASSES = 2
NULL_CLASS = 2  # embedding slot for the unconditional branch


def sample_toy_data(dist: str, n: int, seed: int,
                    class_label: int | None = None):
    """Draw n points with class labels; deterministic per seed.

    gmm8: equal-weight Gaussians (sigma=0.05) centered on the unit circle,
    class = mode index mod 2.  checkerboard: uniform over the black cells
    of a 4x4 board on [-1,1]^2, class = column parity.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if dist == "gmm8":
        angles = 2.0 * np.pi * np.arange(8) / 8.0
        centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        modes = rng.integers(0, 8, size=n)
        if class_label is not None:
            # rejection-free: restrict to the modes of that class
            modes = 2 * rng.integers(0, 4, size=n) + class_label
        x = centers[modes] + GMM8_SIGMA * rng.standard_normal((n, 2))
        labels = modes % 2
        return x, labels.astype(np.int64)
    if dist == "checkerboard":
        col = rng.integers(0, 4, size=n)
        row = 2 * rng.integers(0, 2, size=n) + (col % 2)
        u = rng.random((n, 2))
        x = np.stack([(col + u[:, 0]) * 0.5 - 1.0,
                      (row + u[:, 1]) * 0.5 - 1.0], axis=1)
        labels = col % 2
        if class_label is not None:
            keep = labels == class_label
            # resample rejected rows deterministically until full
            while not keep.all():
                m = int((~keep).sum())
                xr, lr = None, None
                col = rng.integers(0, 4, size=m)
                row = 2 * rng.integers(0, 2, size=m) + (col % 2)
                u = rng.random((m, 2))
                xr = np.stack([(col + u[:, 0]) * 0.5 - 1.0,
                               (row + u[:, 1]) * 0.5 - 1.0], axis=1)
                lr = col % 2
                x[~keep] = xr
                labels[~keep] = lr
                keep = labels == class_label
        return x, labels.astype(np.int64)
    raise ValueError(f"unknown distribution '{dist}'")
