"""Pure-numpy correlation backend, used when the compiled extension is absent.

Accumulates one filter tap at a time over shifted image views, so the work
is E = h*w fused multiply-adds over the full output rather than a Python
loop over output positions.
"""

from __future__ import annotations

import numpy as np


def correlate_valid(images: np.ndarray, filters: np.ndarray) -> np.ndarray:
    """Correlate (n,H,W) images with (M,h,w) filters -> (n,H-h+1,W-w+1,M)."""
    n, H, W = images.shape
    M, h, w = filters.shape
    hp, wp = H - h + 1, W - w + 1
    out = np.zeros((n, hp, wp, M), dtype=np.float64)
    for a in range(h):
        for b in range(w):
            window = images[:, a : a + hp, b : b + wp]
            out += window[..., None] * filters[:, a, b]
    return out


def correlate_valid_adjoint_filters(
    images: np.ndarray, grad_out: np.ndarray, h: int, w: int
) -> np.ndarray:
    """Adjoint of correlate_valid with respect to the filters: (M,h,w)."""
    n, H, W = images.shape
    _, hp, wp, M = grad_out.shape
    flat_grad = grad_out.reshape(-1, M)
    g = np.empty((M, h, w), dtype=np.float64)
    for a in range(h):
        for b in range(w):
            window = images[:, a : a + hp, b : b + wp]
            g[:, a, b] = np.ascontiguousarray(window).reshape(-1) @ flat_grad
    return g
