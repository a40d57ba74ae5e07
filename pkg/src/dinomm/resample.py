"""Separable linear resampling expressed as small dense matrices.

Resizing a 2-D grid is ``R_rows @ grid @ R_cols.T``; because the op is a
matmul it is differentiable for free when applied to a Tensor.
"""

from __future__ import annotations

import numpy as np


def bilinear_matrix(src: int, out: int, start: float = 0.0, length: float | None = None) -> np.ndarray:
    """Weights [out, src] sampling the window [start, start+length) at ``out`` points.

    Uses half-pixel centres (``align_corners=False`` in torch terms) with
    edge clamping, so a constant signal stays constant and resizing to the
    same size over the full window is the identity.
    """
    if length is None:
        length = float(src)
    scale = length / out
    coords = start + (np.arange(out) + 0.5) * scale - 0.5
    coords = np.clip(coords, 0.0, src - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    w = np.zeros((out, src))
    rows = np.arange(out)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def resize_2d(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize over the last two axes of a numpy array."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img
    return bilinear_matrix(h, out_h) @ img @ bilinear_matrix(w, out_w).T


def gaussian_matrix(n: int, sigma: float) -> np.ndarray:
    """Dense [n, n] operator for a 1-D Gaussian blur with reflect padding."""
    radius = max(1, int(np.ceil(3.0 * sigma)))
    taps = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (taps / sigma) ** 2)
    kernel /= kernel.sum()
    m = np.zeros((n, n))
    for i in range(n):
        idx = i + taps
        # reflect without repeating the edge sample: -1 -> 1, n -> n-2
        period = 2 * (n - 1) if n > 1 else 1
        idx = np.mod(idx, period)
        idx = np.where(idx >= n, period - idx, idx)
        np.add.at(m[i], idx, kernel)
    return m
