"""Small numpy image filters shared by augmentation and synthesis."""

from __future__ import annotations

import numpy as np


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian, radius 3 sigma."""
    radius = max(1, int(3.0 * sigma + 0.5))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _conv1d(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="reflect")
    out = np.zeros_like(arr)
    moved = np.moveaxis(padded, axis, 0)
    out_moved = np.moveaxis(out, axis, 0)
    n = arr.shape[axis]
    for tap, weight in enumerate(kernel):
        out_moved += weight * moved[tap : tap + n]
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of the last two axes, reflect padding."""
    if sigma <= 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = _conv1d(np.asarray(img, dtype=np.float64), k, axis=-1)
    return _conv1d(out, k, axis=-2)
