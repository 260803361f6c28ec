"""Backend selection for the sliding-window correlation.

Prefers the compiled extension; falls back to the numpy implementation when
the extension is missing or PATCHGP_FORCE_FALLBACK is set. Both backends
compute the same quantities (summation order differs, so results agree to
roundoff, not bitwise).
"""

from __future__ import annotations

import os

import numpy as np

from . import _fallback

if os.environ.get("PATCHGP_FORCE_FALLBACK"):
    _impl = _fallback
    BACKEND = "fallback"
else:
    try:
        from . import _corr as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "fallback"


def correlate_valid(images: np.ndarray, filters: np.ndarray) -> np.ndarray:
    """Correlate (n,H,W) images with (M,h,w) filters -> (n,H-h+1,W-w+1,M)."""
    images = np.ascontiguousarray(images, dtype=np.float64)
    filters = np.ascontiguousarray(filters, dtype=np.float64)
    return _impl.correlate_valid(images, filters)


def correlate_valid_adjoint_filters(
    images: np.ndarray, grad_out: np.ndarray, h: int, w: int
) -> np.ndarray:
    """Gradient of correlate_valid with respect to the filters."""
    images = np.ascontiguousarray(images, dtype=np.float64)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    return _impl.correlate_valid_adjoint_filters(images, grad_out, h, w)
