"""Image containers, patch extraction, and patchwise squared distances.

Patches are all stride-1, valid-mode windows: an image of width W and
height H yields (W - w + 1) * (H - h + 1) windows per channel, in row-major
grid order, and pixel (a, b) of the window at grid position (i, j) is image
pixel (i + a, j + b).

Two distance paths are provided. The naive path forms patch-minus-filter
differences directly and is the oracle. The fast path expands
||x - z||^2 = ||x||^2 - 2 x.z + ||z||^2 and computes the cross term with a
sliding-window correlation and the ||x||^2 term by correlating the squared
image with an all-ones window; it is differentiable with respect to z.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel, tape as T
from .errors import DimensionMismatch, PatchLargerThanImage

FLATTEN_PER_CHANNEL = "flatten-per-channel"
STACK_CHANNELS = "stack-channels"


class ImageBatch:
    """Dense pixel grids, stored as (n, H, W, C) float64.

    Pixels are treated as immutable once wrapped: derived per-image values
    (deduplicated patches, channel planes) are cached on the instance, and
    subsets remember their source batch so those caches are computed once
    per distinct image rather than once per minibatch.
    """

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 3:
            pixels = pixels[..., None]
        if pixels.ndim != 4:
            raise DimensionMismatch(f"expected (n, H, W, C) pixels, got {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("image pixels must be finite")
        self.pixels = pixels
        self._dedup_cache: dict = {}
        self._planes: dict = {}
        self._parent: "ImageBatch | None" = None
        self._parent_idx = None

    @property
    def n(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def channels(self) -> int:
        return self.pixels.shape[3]

    def subset(self, idx) -> "ImageBatch":
        child = ImageBatch(self.pixels[idx])
        child._parent = self
        child._parent_idx = idx
        return child

    def channel_plane(self, ci: int) -> "ImageBatch":
        """This batch restricted to one channel, memoized per channel."""
        plane = self._planes.get(ci)
        if plane is None:
            plane = ImageBatch(self.pixels[:, :, :, ci])
            if self._parent is not None:
                plane._parent = self._parent.channel_plane(ci)
                plane._parent_idx = self._parent_idx
            self._planes[ci] = plane
        return plane

    def flat(self) -> np.ndarray:
        """(n, H*W*C) view for whole-image kernels."""
        return self.pixels.reshape(self.n, -1)


class PatchGrid:
    """Extracted patches: (n, p, e) with p windows of length e per image."""

    def __init__(self, patches: np.ndarray, grid_h: int, grid_w: int, channel_mode: str):
        self.patches = patches
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.channel_mode = channel_mode

    @property
    def n(self) -> int:
        return self.patches.shape[0]

    @property
    def p(self) -> int:
        return self.patches.shape[1]

    @property
    def e(self) -> int:
        return self.patches.shape[2]


def _check_patch_size(batch: ImageBatch, w: int, h: int) -> tuple[int, int]:
    if w > batch.width or h > batch.height:
        raise PatchLargerThanImage(
            f"patch {w}x{h} exceeds image {batch.width}x{batch.height}"
        )
    return batch.height - h + 1, batch.width - w + 1


def extract_patches(
    batch: ImageBatch, w: int, h: int, channel_mode: str = FLATTEN_PER_CHANNEL
) -> PatchGrid:
    """All valid windows of every image.

    flatten-per-channel: C * (W-w+1)(H-h+1) patches of length w*h, ordered
    channel-major (all of channel 0's grid, then channel 1, ...).
    stack-channels: (W-w+1)(H-h+1) patches of length w*h*C, each flattened
    in (row, column, channel) order.
    """
    gh, gw = _check_patch_size(batch, w, h)
    n, c = batch.n, batch.channels
    # windows: (n, gh, gw, C, h, w)
    windows = sliding_window_view(batch.pixels, (h, w), axis=(1, 2))
    if channel_mode == FLATTEN_PER_CHANNEL:
        per_channel = np.moveaxis(windows, 3, 1)  # (n, C, gh, gw, h, w)
        patches = per_channel.reshape(n, c * gh * gw, h * w)
    elif channel_mode == STACK_CHANNELS:
        stacked = np.moveaxis(windows, 3, 5)  # (n, gh, gw, h, w, C)
        patches = stacked.reshape(n, gh * gw, h * w * c)
    else:
        raise ValueError(f"unknown channel_mode {channel_mode!r}")
    return PatchGrid(np.ascontiguousarray(patches), gh, gw, channel_mode)


def patch_sq_distances_naive(
    batch: ImageBatch,
    z: np.ndarray,
    w: int,
    h: int,
    channel_mode: str = FLATTEN_PER_CHANNEL,
) -> np.ndarray:
    """Squared distances between every patch and every row of z, by direct
    differencing: entry [i, p, m] = ||x_i^[p] - z_m||^2."""
    z = np.asarray(z, dtype=np.float64)
    grid = extract_patches(batch, w, h, channel_mode)
    if z.ndim != 2 or z.shape[1] != grid.e:
        raise DimensionMismatch(f"z must be (M, {grid.e}), got {z.shape}")
    out = np.empty((grid.n, grid.p, z.shape[0]), dtype=np.float64)
    # chunk over images to bound the (chunk, p, M, e) temporary
    chunk = max(1, int(2_000_000 // max(1, grid.p * z.shape[0] * grid.e)))
    for s in range(0, grid.n, chunk):
        block = grid.patches[s : s + chunk]
        diff = block[:, :, None, :] - z[None, None, :, :]
        out[s : s + chunk] = np.einsum("ipme,ipme->ipm", diff, diff)
    return out


def correlate_patches(images_2d: np.ndarray, filters, h: int, w: int):
    """Tape-aware valid correlation: constant (n,H,W) images against (M,h,w)
    filters (Node or array) -> (n, H-h+1, W-w+1, M)."""
    fv = T.value_of(filters)
    out = _accel.correlate_valid(images_2d, fv)
    return T.custom_node(
        out,
        [(filters, lambda g: _accel.correlate_valid_adjoint_filters(images_2d, g, h, w))],
        op="correlate",
    )


def patch_sq_distances_conv(
    batch: ImageBatch,
    z,
    w: int,
    h: int,
    channel_mode: str = FLATTEN_PER_CHANNEL,
    clamp: bool = True,
):
    """Fast path for the same distances, via sliding-window correlation.

    z may be a Node; the result is then differentiable with respect to z.
    Rounding can push exact zeros slightly negative, so the result is
    clamped at 0 unless clamp is disabled (the oracle tests compare the
    unclamped values).
    """
    gh, gw = _check_patch_size(batch, w, h)
    n, c = batch.n, batch.channels
    p = gh * gw
    zv = T.value_of(z)
    ones = np.ones((1, h, w), dtype=np.float64)

    if channel_mode == FLATTEN_PER_CHANNEL:
        if zv.ndim != 2 or zv.shape[1] != w * h:
            raise DimensionMismatch(f"z must be (M, {w * h}), got {zv.shape}")
        m = zv.shape[0]
        filters = T.reshape(z, (m, h, w)) if T.is_node(z) else zv.reshape(m, h, w)
        zsq = T.reduce_sum(mul_self(z), axis=1)  # (M,)
        blocks = []
        for ci in range(c):
            plane = np.ascontiguousarray(batch.pixels[:, :, :, ci])
            xsq = _accel.correlate_valid(plane * plane, ones).reshape(n, p, 1)
            cross = T.reshape(correlate_patches(plane, filters, h, w), (n, p, m))
            d2 = T.add(T.sub(xsq, T.mul(2.0, cross)), T.reshape(zsq, (1, 1, m)))
            blocks.append(d2)
        d2_all = T.concat(blocks, axis=1) if len(blocks) > 1 else blocks[0]
    elif channel_mode == STACK_CHANNELS:
        if zv.ndim != 2 or zv.shape[1] != w * h * c:
            raise DimensionMismatch(f"z must be (M, {w * h * c}), got {zv.shape}")
        m = zv.shape[0]
        # rows are (row, column, channel)-ordered patches
        filters_whc = T.reshape(z, (m, h, w, c)) if T.is_node(z) else zv.reshape(m, h, w, c)
        zsq = T.reduce_sum(mul_self(z), axis=1)
        cross = None
        xsq = np.zeros((n, p, 1), dtype=np.float64)
        for ci in range(c):
            plane = np.ascontiguousarray(batch.pixels[:, :, :, ci])
            xsq += _accel.correlate_valid(plane * plane, ones).reshape(n, p, 1)
            fc = filters_whc[:, :, :, ci]
            term = T.reshape(correlate_patches(plane, fc, h, w), (n, p, m))
            cross = term if cross is None else T.add(cross, term)
        d2_all = T.add(T.sub(xsq, T.mul(2.0, cross)), T.reshape(zsq, (1, 1, m)))
    else:
        raise ValueError(f"unknown channel_mode {channel_mode!r}")

    return T.clamp_min(d2_all, 0.0) if clamp else d2_all


def mul_self(x):
    """Elementwise square that works for Node or array inputs."""
    return T.mul(x, x)
