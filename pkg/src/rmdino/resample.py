"""Separable bilinear and nearest-neighbour resampling as explicit matrices."""

from __future__ import annotations

import numpy as np


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out × n_in] half-pixel-centred bilinear weights (rows sum to 1)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    s = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * s - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a [C×H×W] array."""
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ry = bilinear_matrix(h, out_h).astype(img.dtype)
    rx = bilinear_matrix(w, out_w).astype(img.dtype)
    return np.einsum("yh,chw,xw->cyx", ry, img, rx, optimize=True)


def grid_interp_matrix(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Linear map from a flattened src grid to a flattened dst grid (row-major)."""
    return np.kron(bilinear_matrix(src[0], dst[0]), bilinear_matrix(src[1], dst[1]))


def upsample_nearest(grid: np.ndarray, factor: int) -> np.ndarray:
    """Replicate every cell of a 2-D grid into a ``factor × factor`` block."""
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)
