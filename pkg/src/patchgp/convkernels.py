"""Convolutional kernels over images with inducing inputs in patch space.

An image-level GP f is a (weighted) sum of a patch-level GP g over all
patches: f(x) = sum_p w_p g(x^[p]). Placing inducing variables on g makes
K_uu a plain patch Gram and k_fu a weighted sum of patch kernels, while the
diagonal of K_ff needs the patch-pair Gram of each image.

Variants: invariant (unit weights), weighted, colour-patch (whC patches),
multi-channel (one g_c per channel, block-diagonal K_uu), additive-colour
(per-channel base kernels combined additively, factorizing the per-channel
weights), and conv-plus-rbf (sum with an image-space RBF, 2-block K_uu).

The K_ff diagonal contracts each image's *deduplicated* patch Gram with
aggregated weights; images repeat patches heavily (backgrounds), and
sum_pq w_p w_q k(x^[p], x^[q]) only depends on patches through their
multiset. A literal per-image P x P reference is kept for verification.
"""

from __future__ import annotations

import numpy as np

from . import tape as T
from .errors import ChannelMismatch, DimensionMismatch, VariantMismatch
from .images import (
    FLATTEN_PER_CHANNEL,
    STACK_CHANNELS,
    ImageBatch,
    extract_patches,
    patch_sq_distances_conv,
)
from .kernels import RbfParams, kernel_diag, kernel_matrix, rbf_from_sq_dist, scale_inputs

VARIANTS = (
    "invariant",
    "weighted",
    "colour-patch",
    "multi-channel",
    "additive-colour",
    "conv-plus-rbf",
)


class ConvKernelSpec:
    """Configuration of one convolutional kernel.

    base: RbfParams, or a list of per-channel RbfParams for the
    multi-channel and additive-colour variants.
    weights: per-patch w_p (P,), or per-patch-per-channel (P, C) for
    multi-channel; the invariant variant carries implicit unit weights.
    channel_weights: per-channel w_c for additive-colour.
    rbf_component: image-space RbfParams for conv-plus-rbf.
    """

    def __init__(
        self,
        variant: str,
        base,
        patch_w: int,
        patch_h: int,
        weights=None,
        channel_weights=None,
        rbf_component: RbfParams | None = None,
    ):
        if variant not in VARIANTS:
            raise VariantMismatch(f"unknown variant {variant!r}")
        if variant == "conv-plus-rbf" and rbf_component is None:
            raise VariantMismatch("conv-plus-rbf requires an rbf_component")
        if variant == "additive-colour" and channel_weights is None:
            raise VariantMismatch("additive-colour requires channel_weights")
        self.variant = variant
        self.base = base
        self.patch_w = int(patch_w)
        self.patch_h = int(patch_h)
        self.weights = weights
        self.channel_weights = channel_weights
        self.rbf_component = rbf_component


def _resolve_weights(spec: ConvKernelSpec, p_total: int):
    if spec.variant == "invariant":
        return np.ones(p_total, dtype=np.float64)
    wts = spec.weights
    if wts is None or T.value_of(wts).shape[0] != p_total:
        got = None if wts is None else T.value_of(wts).shape
        raise DimensionMismatch(f"need {p_total} patch weights, got {got}")
    return wts


def _kg_patches_vs_z(batch: ImageBatch, z, base: RbfParams, w: int, h: int, channel_mode: str):
    """Base kernel between every patch and every row of z: (n, p, M)."""
    if base.is_isotropic:
        d2_raw = patch_sq_distances_conv(batch, z, w, h, channel_mode)
        ell2 = T.mul(base.lengthscales, base.lengthscales)
        return rbf_from_sq_dist(T.div(d2_raw, ell2), base)
    # ARD scales each pixel dimension, so distances cannot come from the
    # correlation trick; fall back to direct products on scaled patches.
    grid = extract_patches(batch, w, h, channel_mode)
    xs = scale_inputs(grid.patches, base)
    zs = scale_inputs(z, base)
    n, p = grid.n, grid.p
    m = T.value_of(zs).shape[0]
    sa = T.reshape(T.reduce_sum(T.mul(xs, xs), axis=2), (n, p, 1))
    sb = T.reshape(T.reduce_sum(T.mul(zs, zs), axis=1), (1, 1, m))
    cross = T.matmul(xs, T.transpose(zs))
    d2 = T.clamp_min(T.add(T.sub(sa, T.mul(2.0, cross)), sb), 0.0)
    return rbf_from_sq_dist(d2, base)


def _weighted_patch_sum(k_npm, wts):
    """sum_p w_p k[:, p, :] -> (n, M)."""
    p = T.value_of(k_npm).shape[1]
    return T.reduce_sum(T.mul(k_npm, T.reshape(wts, (1, p, 1))), axis=1)


def conv_kfu(batch: ImageBatch, z_patches, spec: ConvKernelSpec):
    """k_fu for the invariant and weighted variants: (n, M)."""
    if spec.variant not in ("invariant", "weighted"):
        raise VariantMismatch(f"conv_kfu does not handle {spec.variant!r}")
    k = _kg_patches_vs_z(
        batch, z_patches, spec.base, spec.patch_w, spec.patch_h, FLATTEN_PER_CHANNEL
    )
    wts = _resolve_weights(spec, T.value_of(k).shape[1])
    return _weighted_patch_sum(k, wts)


def conv_kuu(z_patches, spec: ConvKernelSpec):
    """K_uu over inducing patches: the plain base Gram."""
    zv = T.value_of(z_patches)
    e = spec.patch_w * spec.patch_h
    if spec.variant == "colour-patch":
        e = None  # validated by the caller against whC
    elif zv.shape[1] != e:
        raise DimensionMismatch(f"z columns {zv.shape[1]} != patch size {e}")
    return kernel_matrix(z_patches, None, spec.base)


def _dedup_batch(patches: np.ndarray):
    """Per-image exact deduplication, zero-padded to a common width.

    Returns (uniq (n, u_max, e), inverse (n, p), u_max). Padding rows are
    all-zero and receive zero aggregated weight, so they never contribute.
    """
    n, p, e = patches.shape
    uniqs = []
    invs = np.empty((n, p), dtype=np.intp)
    for i in range(n):
        u, inv = np.unique(patches[i], axis=0, return_inverse=True)
        uniqs.append(u)
        invs[i] = inv.reshape(-1)
    u_max = max(u.shape[0] for u in uniqs)
    padded = np.zeros((n, u_max, e), dtype=np.float64)
    for i, u in enumerate(uniqs):
        padded[i, : u.shape[0]] = u
    return padded, invs, u_max


def _dedup_for(batch: ImageBatch, w: int, h: int, channel_mode: str):
    """Deduplicated patches of a batch, computed once per source batch.

    Subsets inherit their source's result by row slicing, so training
    epochs and repeated evaluations deduplicate each distinct image once.
    """
    key = (w, h, channel_mode)
    hit = batch._dedup_cache.get(key)
    if hit is None:
        if batch._parent is not None:
            uniq, inv_idx, u_max = _dedup_for(batch._parent, w, h, channel_mode)
            idx = batch._parent_idx
            hit = (uniq[idx], inv_idx[idx], u_max)
        else:
            hit = _dedup_batch(extract_patches(batch, w, h, channel_mode).patches)
        batch._dedup_cache[key] = hit
    return hit


def patch_weight_sums(wts, inv_idx: np.ndarray, u_max: int):
    """Aggregate patch weights onto deduplicated patch slots: (n, u_max)."""
    wv = T.value_of(wts)
    n, p = inv_idx.shape
    rows = np.repeat(np.arange(n), p)
    out = np.zeros((n, u_max), dtype=np.float64)
    np.add.at(out, (rows, inv_idx.reshape(-1)), np.broadcast_to(wv, (n, p)).reshape(-1))

    def vjp(g):
        return g[np.arange(n)[:, None], inv_idx].sum(axis=0)

    return T.custom_node(out, [(wts, vjp)], op="patch_weight_sums")


def _pairwise_sq_dist_const(x: np.ndarray) -> np.ndarray:
    """(n, u, e) constant -> (n, u, u) squared distances, clamped at 0."""
    s = np.einsum("nue,nue->nu", x, x)
    g = x @ np.swapaxes(x, -1, -2)
    d2 = s[:, :, None] + s[:, None, :] - 2.0 * g
    return np.maximum(d2, 0.0)


def _kff_diag_weighted(
    batch: ImageBatch, base: RbfParams, wts, w: int, h: int, channel_mode: str
):
    """diag K_ff = sum_pq w_p w_q k_g(x^[p], x^[q]) per image: (n,)."""
    n = batch.n
    uniq, inv_idx, u_max = _dedup_for(batch, w, h, channel_mode)
    agg = patch_weight_sums(wts, inv_idx, u_max)
    if base.is_isotropic:
        d2_raw = _pairwise_sq_dist_const(uniq)
        ell2 = T.mul(base.lengthscales, base.lengthscales)
        kg = rbf_from_sq_dist(T.div(d2_raw, ell2), base)
    else:
        us = scale_inputs(uniq, base)
        s = T.reduce_sum(T.mul(us, us), axis=2)
        g = T.matmul(us, T.transpose(us))
        d2 = T.clamp_min(
            T.sub(
                T.add(T.reshape(s, (n, u_max, 1)), T.reshape(s, (n, 1, u_max))),
                T.mul(2.0, g),
            ),
            0.0,
        )
        kg = rbf_from_sq_dist(d2, base)
    t = T.matmul(T.reshape(agg, (n, 1, u_max)), kg)
    return T.reduce_sum(T.mul(T.reshape(t, (n, u_max)), agg), axis=1)


def conv_kff_diag(batch: ImageBatch, spec: ConvKernelSpec):
    """diag K_ff for the invariant and weighted variants: (n,)."""
    if spec.variant not in ("invariant", "weighted"):
        raise VariantMismatch(f"conv_kff_diag does not handle {spec.variant!r}")
    gh = batch.height - spec.patch_h + 1
    gw = batch.width - spec.patch_w + 1
    wts = _resolve_weights(spec, batch.channels * gh * gw)
    return _kff_diag_weighted(
        batch, spec.base, wts, spec.patch_w, spec.patch_h, FLATTEN_PER_CHANNEL
    )


def conv_kff_diag_reference(batch: ImageBatch, spec: ConvKernelSpec) -> np.ndarray:
    """Literal per-image patch-pair Gram contraction (no deduplication);
    the verification reference for conv_kff_diag. Arrays only."""
    if spec.variant not in ("invariant", "weighted"):
        raise VariantMismatch(f"reference does not handle {spec.variant!r}")
    grid = extract_patches(batch, spec.patch_w, spec.patch_h, FLATTEN_PER_CHANNEL)
    wts = T.value_of(_resolve_weights(spec, grid.p))
    base = spec.base
    var = float(T.value_of(base.variance))
    out = np.empty(grid.n, dtype=np.float64)
    for i in range(grid.n):
        x = T.value_of(scale_inputs(grid.patches[i], base))
        s = np.einsum("pe,pe->p", x, x)
        d2 = np.maximum(s[:, None] + s[None, :] - 2.0 * (x @ x.T), 0.0)
        kg = var * np.exp(-0.5 * d2)
        out[i] = wts @ kg @ wts
    return out


def _per_channel_bases(spec: ConvKernelSpec, c: int) -> list[RbfParams]:
    bases = spec.base if isinstance(spec.base, (list, tuple)) else [spec.base] * c
    if len(bases) != c:
        raise ChannelMismatch(f"{len(bases)} base kernels for {c} channels")
    return list(bases)


def multichannel_cov(batch: ImageBatch, z_patches, spec: ConvKernelSpec):
    """Covariances for one patch-response GP per channel.

    Returns (kfu (n, M*C) ordered colour-major, kuu_blocks list of C (M, M)
    Grams, kff_diag (n,)). Cross-channel prior covariance is zero by
    construction, hence the block list instead of a dense K_uu.
    """
    if spec.variant != "multi-channel":
        raise VariantMismatch(f"multichannel_cov does not handle {spec.variant!r}")
    c = batch.channels
    bases = _per_channel_bases(spec, c)
    w, h = spec.patch_w, spec.patch_h
    wv = T.value_of(spec.weights)
    gh, gw = batch.height - h + 1, batch.width - w + 1
    if wv.shape != (gh * gw, c):
        raise ChannelMismatch(f"weights must be ({gh * gw}, {c}), got {wv.shape}")
    kfu_blocks = []
    kuu_blocks = []
    kff = None
    for ci in range(c):
        plane = batch.channel_plane(ci)
        w_c = T.getitem(spec.weights, (slice(None), ci)) if T.is_node(spec.weights) else wv[:, ci]
        k = _kg_patches_vs_z(plane, z_patches, bases[ci], w, h, FLATTEN_PER_CHANNEL)
        kfu_blocks.append(_weighted_patch_sum(k, w_c))
        kuu_blocks.append(kernel_matrix(z_patches, None, bases[ci]))
        kff_c = _kff_diag_weighted(plane, bases[ci], w_c, w, h, FLATTEN_PER_CHANNEL)
        kff = kff_c if kff is None else T.add(kff, kff_c)
    kfu = T.concat(kfu_blocks, axis=1) if len(kfu_blocks) > 1 else kfu_blocks[0]
    return kfu, kuu_blocks, kff


def sum_cov(batch: ImageBatch, z_patches, z_images, spec: ConvKernelSpec):
    """Covariances for the weighted-conv plus image-RBF sum kernel.

    Returns (kfu (n, 2M) with the RBF block first, kuu_blocks [rbf Gram,
    patch Gram], kff_diag). The two component GPs are independent in the
    prior, so there is no cross block.
    """
    if spec.variant != "conv-plus-rbf":
        raise VariantMismatch(f"sum_cov does not handle {spec.variant!r}")
    rbf = spec.rbf_component
    x_flat = batch.flat()
    zv = T.value_of(z_images)
    if zv.shape[1] != x_flat.shape[1]:
        raise DimensionMismatch(
            f"z_images columns {zv.shape[1]} != image size {x_flat.shape[1]}"
        )
    kfu_rbf = kernel_matrix(x_flat, z_images, rbf)
    inner = ConvKernelSpec(
        "weighted", spec.base, spec.patch_w, spec.patch_h, weights=spec.weights
    )
    kfu_conv = conv_kfu(batch, z_patches, inner)
    kuu_blocks = [kernel_matrix(z_images, None, rbf), kernel_matrix(z_patches, None, spec.base)]
    kff = T.add(kernel_diag(x_flat, rbf), conv_kff_diag(batch, inner))
    kfu = T.concat([kfu_rbf, kfu_conv], axis=1)
    return kfu, kuu_blocks, kff


def colour_patch_cov(batch: ImageBatch, z_patches, spec: ConvKernelSpec):
    """Weighted-conv covariances with full w x h x C colour patches."""
    if spec.variant != "colour-patch":
        raise VariantMismatch(f"colour_patch_cov does not handle {spec.variant!r}")
    w, h, c = spec.patch_w, spec.patch_h, batch.channels
    zv = T.value_of(z_patches)
    if zv.shape[1] != w * h * c:
        raise DimensionMismatch(f"z columns {zv.shape[1]} != patch size {w * h * c}")
    k = _kg_patches_vs_z(batch, z_patches, spec.base, w, h, STACK_CHANNELS)
    wts = _resolve_weights(spec, T.value_of(k).shape[1])
    kfu = _weighted_patch_sum(k, wts)
    kuu = kernel_matrix(z_patches, None, spec.base)
    kff = _kff_diag_weighted(batch, spec.base, wts, w, h, STACK_CHANNELS)
    return kfu, kuu, kff


def channel_slice_indices(e_per_channel: int, c: int, ci: int) -> np.ndarray:
    """Indices of channel ci inside a (row, column, channel)-flattened patch."""
    return np.arange(e_per_channel) * c + ci


def additive_colour_base(patch_a, patch_b, per_channel_params, channel_weights):
    """Base kernel value sum_c w_c k_c(a_c, b_c) over channel slices of two
    stacked colour patches. Scalar output."""
    a = np.asarray(T.value_of(patch_a), dtype=np.float64).reshape(-1)
    b = np.asarray(T.value_of(patch_b), dtype=np.float64).reshape(-1)
    c = len(per_channel_params)
    wv = np.asarray(T.value_of(channel_weights), dtype=np.float64).reshape(-1)
    if wv.shape[0] != c:
        raise ChannelMismatch(f"{wv.shape[0]} channel weights for {c} kernels")
    if a.shape != b.shape or a.size % c != 0:
        raise ChannelMismatch(f"patch size {a.size} not divisible into {c} channels")
    e = a.size // c
    total = 0.0
    for ci, params in enumerate(per_channel_params):
        idx = channel_slice_indices(e, c, ci)
        diff = (a[idx] - b[idx]) / T.value_of(params.lengthscales)
        d2 = float(np.sum(diff * diff))
        total += wv[ci] * float(T.value_of(params.variance)) * np.exp(-0.5 * d2)
    return total


def additive_colour_cov(batch: ImageBatch, z_patches, spec: ConvKernelSpec):
    """Covariances for the additive-colour variant.

    The patch-response GP has base kernel sum_c v_c k_c over channel slices
    with v_c = channel_weights[c]^2, which makes the model equal to the
    multi-channel variant with factorized weights w_pc = w_p w_c while
    keeping the base kernel positive semidefinite for any real w_c.
    Returns (kfu (n, M), kuu (M, M), kff_diag (n,)).
    """
    if spec.variant != "additive-colour":
        raise VariantMismatch(f"additive_colour_cov does not handle {spec.variant!r}")
    c = batch.channels
    bases = _per_channel_bases(spec, c)
    w, h = spec.patch_w, spec.patch_h
    e = w * h
    zv = T.value_of(z_patches)
    if zv.shape[1] != e * c:
        raise DimensionMismatch(f"z columns {zv.shape[1]} != patch size {e * c}")
    gh, gw = batch.height - h + 1, batch.width - w + 1
    wts = _resolve_weights(spec, gh * gw)
    cw = spec.channel_weights
    kfu = None
    kuu = None
    kff = None
    for ci in range(c):
        w_ci = T.getitem(cw, ci) if T.is_node(cw) else T.value_of(cw)[ci]
        v_c = T.mul(w_ci, w_ci)
        plane = batch.channel_plane(ci)
        idx = channel_slice_indices(e, c, ci)
        z_c = T.getitem(z_patches, (slice(None), idx)) if T.is_node(z_patches) else zv[:, idx]
        k = _kg_patches_vs_z(plane, z_c, bases[ci], w, h, FLATTEN_PER_CHANNEL)
        kfu_c = T.mul(v_c, _weighted_patch_sum(k, wts))
        kuu_c = T.mul(v_c, kernel_matrix(z_c, None, bases[ci]))
        kff_c = T.mul(v_c, _kff_diag_weighted(plane, bases[ci], wts, w, h, FLATTEN_PER_CHANNEL))
        kfu = kfu_c if kfu is None else T.add(kfu, kfu_c)
        kuu = kuu_c if kuu is None else T.add(kuu, kuu_c)
        kff = kff_c if kff is None else T.add(kff, kff_c)
    return kfu, kuu, kff
