"""Synthetic desk-scale datasets: Gaussian blobs and two moons."""

from __future__ import annotations

import numpy as np


def blob_centers(num_classes: int, dim: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    """Draw one Gaussian cluster center per class, shape (num_classes, dim)."""
    return rng.normal(0.0, spread, size=(num_classes, dim))


def gaussian_blobs(
    n: int, centers: np.ndarray, noise: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Sample n points from isotropic Gaussians around the given centers.

    Labels are drawn uniformly over classes; returns (X, y).
    """
    num_classes, dim = centers.shape
    y = rng.integers(0, num_classes, size=n)
    x = centers[y] + rng.normal(0.0, noise, size=(n, dim))
    return x, y


def two_moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaved half-circles in 2D, n points split evenly, returns (X, y)."""
    n_out = n // 2
    n_in = n - n_out
    t_out = rng.uniform(0.0, np.pi, size=n_out)
    t_in = rng.uniform(0.0, np.pi, size=n_in)
    outer = np.column_stack([np.cos(t_out), np.sin(t_out)])
    inner = np.column_stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)])
    x = np.vstack([outer, inner]) + rng.normal(0.0, noise, size=(n, 2))
    y = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    perm = rng.permutation(n)
    return x[perm], y[perm]
