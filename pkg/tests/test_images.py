"""Image containers, patch extraction, and the fast patch-distance path.

The naive distance routine is itself validated against a literal per-pixel
double loop written here, then serves as the oracle for the convolution
path.
"""

import numpy as np
import pytest
from helpers import check_gradient

import patchgp.tape as T
from patchgp._accel import _fallback
from patchgp.errors import DimensionMismatch, PatchLargerThanImage
from patchgp.images import (
    FLATTEN_PER_CHANNEL,
    STACK_CHANNELS,
    ImageBatch,
    correlate_patches,
    extract_patches,
    patch_sq_distances_conv,
    patch_sq_distances_naive,
)

try:
    from patchgp._accel import _corr
except ImportError:
    _corr = None


def loop_sq_distances(batch, z, w, h):
    """Brute-force per-pixel oracle for patchwise squared distances."""
    px = batch.pixels
    n, height, width, channels = px.shape
    assert channels == 1
    gh, gw = height - h + 1, width - w + 1
    out = np.zeros((n, gh * gw, z.shape[0]))
    for i in range(n):
        for r in range(gh):
            for c in range(gw):
                patch = px[i, r : r + h, c : c + w, 0].ravel()
                for m in range(z.shape[0]):
                    out[i, r * gw + c, m] = float(np.sum((patch - z[m]) ** 2))
    return out


class TestImageBatch:
    def test_shape_and_accessors(self):
        batch = ImageBatch(np.zeros((5, 4, 3, 2)))
        assert (batch.n, batch.height, batch.width, batch.channels) == (5, 4, 3, 2)

    def test_grayscale_promotes_channel_axis(self):
        batch = ImageBatch(np.zeros((5, 4, 3)))
        assert batch.channels == 1

    def test_flat_row_major_with_channel_fastest(self):
        px = np.arange(2 * 2 * 2 * 3, dtype=np.float64).reshape(2, 2, 2, 3)
        flat = ImageBatch(px).flat()
        np.testing.assert_array_equal(flat, px.reshape(2, -1))

    def test_subset(self):
        batch = ImageBatch(np.arange(24.0).reshape(4, 2, 3, 1))
        sub = batch.subset(np.array([2, 0]))
        np.testing.assert_array_equal(sub.pixels, batch.pixels[[2, 0]])


class TestExtractPatches:
    def test_paper_patch_counts(self):
        batch = ImageBatch(np.zeros((1, 28, 28, 1)))
        assert extract_patches(batch, 3, 3).p == 676
        grid = extract_patches(batch, 5, 5)
        assert grid.p == 576
        assert grid.p**2 == pytest.approx(3.3e5, rel=0.01)

    def test_degenerate_full_window(self):
        rng = np.random.default_rng(0)
        px = rng.random((2, 4, 5, 1))
        grid = extract_patches(ImageBatch(px), 5, 4)
        assert grid.p == 1
        np.testing.assert_array_equal(grid.patches[:, 0, :], px.reshape(2, -1))

    def test_pixel_identity(self):
        rng = np.random.default_rng(1)
        px = rng.random((2, 6, 7, 1))
        w, h = 3, 2
        grid = extract_patches(ImageBatch(px), w, h)
        gw = 7 - w + 1
        for i in range(2):
            for r in range(6 - h + 1):
                for c in range(gw):
                    patch = grid.patches[i, r * gw + c].reshape(h, w)
                    for a in range(h):
                        for b in range(w):
                            assert patch[a, b] == px[i, r + a, c + b, 0]

    def test_flatten_per_channel_counts_and_order(self):
        rng = np.random.default_rng(2)
        px = rng.random((2, 5, 5, 3))
        grid = extract_patches(ImageBatch(px), 2, 2, FLATTEN_PER_CHANNEL)
        per = 4 * 4
        assert grid.p == 3 * per
        assert grid.e == 4
        # channel-major: patches of channel c occupy rows [c*per, (c+1)*per)
        for c in range(3):
            mono = extract_patches(ImageBatch(px[:, :, :, c]), 2, 2)
            np.testing.assert_array_equal(
                grid.patches[:, c * per : (c + 1) * per, :], mono.patches
            )

    def test_stack_channels_layout(self):
        rng = np.random.default_rng(3)
        px = rng.random((1, 3, 3, 2))
        grid = extract_patches(ImageBatch(px), 2, 2, STACK_CHANNELS)
        assert grid.p == 4
        assert grid.e == 8
        # entries ordered (row, col, channel), matching the pixel layout
        np.testing.assert_array_equal(grid.patches[0, 0], px[0, 0:2, 0:2, :].ravel())

    def test_patch_larger_than_image(self):
        batch = ImageBatch(np.zeros((1, 4, 4, 1)))
        with pytest.raises(PatchLargerThanImage):
            extract_patches(batch, 5, 3)
        with pytest.raises(PatchLargerThanImage):
            extract_patches(batch, 3, 5)


class TestNaiveDistances:
    def test_coincident_patch_is_zero(self):
        rng = np.random.default_rng(4)
        px = rng.random((1, 5, 5, 1))
        z = px[0, 1:4, 2:5, 0].ravel()[None, :]
        d = patch_sq_distances_naive(ImageBatch(px), z, 3, 3)
        gw = 3
        assert d[0, 1 * gw + 2, 0] == pytest.approx(0.0, abs=1e-12)

    def test_zero_image_unit_z(self):
        z = np.zeros((2, 9))
        z[:, 0] = 1.0
        d = patch_sq_distances_naive(ImageBatch(np.zeros((1, 4, 4, 1))), z, 3, 3)
        np.testing.assert_allclose(d, 1.0)

    def test_against_pixel_loop(self):
        rng = np.random.default_rng(5)
        batch = ImageBatch(rng.random((2, 6, 6, 1)))
        z = rng.random((4, 9))
        got = T.value_of(patch_sq_distances_naive(batch, z, 3, 3))
        np.testing.assert_allclose(got, loop_sq_distances(batch, z, 3, 3), atol=1e-12)

    def test_z_width_mismatch(self):
        with pytest.raises(DimensionMismatch):
            patch_sq_distances_naive(ImageBatch(np.zeros((1, 4, 4, 1))), np.zeros((2, 8)), 3, 3)


class TestConvDistances:
    @pytest.mark.parametrize(
        "n,height,width,w,h,m,seed",
        [
            (2, 6, 6, 3, 3, 4, 0),
            (1, 9, 7, 2, 5, 3, 1),
            (3, 12, 12, 1, 1, 2, 2),
            (2, 32, 32, 7, 7, 5, 3),
            (1, 5, 5, 5, 5, 3, 4),
        ],
    )
    def test_matches_naive(self, n, height, width, w, h, m, seed):
        rng = np.random.default_rng(seed)
        batch = ImageBatch(rng.normal(size=(n, height, width, 1)))
        z = rng.normal(size=(m, w * h))
        conv = T.value_of(patch_sq_distances_conv(batch, z, w, h))
        naive = T.value_of(patch_sq_distances_naive(batch, z, w, h))
        np.testing.assert_allclose(conv, naive, rtol=1e-8, atol=1e-10)
        assert np.all(conv >= 0.0)

    def test_degenerate_is_plain_pairwise(self):
        rng = np.random.default_rng(6)
        batch = ImageBatch(rng.random((3, 4, 5, 1)))
        z = rng.random((2, 20))
        d = T.value_of(patch_sq_distances_conv(batch, z, 5, 4))
        flat = batch.pixels.reshape(3, -1)
        want = ((flat[:, None, :] - z[None, :, :]) ** 2).sum(-1)
        np.testing.assert_allclose(d[:, 0, :], want, rtol=1e-10, atol=1e-12)

    def test_integer_coincident_patch_exactly_zero(self):
        px = np.zeros((1, 4, 4, 1))
        px[0, :, :, 0] = np.arange(16.0).reshape(4, 4)
        z = px[0, 0:3, 0:3, 0].ravel()[None, :]
        d = T.value_of(patch_sq_distances_conv(ImageBatch(px), z, 3, 3))
        assert d[0, 0, 0] == 0.0

    def test_gradient_wrt_z(self):
        rng = np.random.default_rng(7)
        batch = ImageBatch(rng.random((1, 5, 5, 1)))
        z = rng.random((2, 9))
        w = rng.normal(size=(1, 9, 2))
        check_gradient(
            lambda n: T.reduce_sum(T.mul(patch_sq_distances_conv(batch, n, 3, 3), w)),
            z,
            rtol=1e-5,
            atol=1e-7,
        )


class TestCorrelatePatches:
    def test_matches_explicit_patch_dot(self):
        rng = np.random.default_rng(8)
        images = rng.normal(size=(2, 6, 5))
        filters = rng.normal(size=(3, 2, 3))
        got = T.value_of(correlate_patches(images, filters, 2, 3))
        patches = extract_patches(ImageBatch(images), 3, 2).patches
        want = (patches @ filters.reshape(3, -1).T).reshape(2, 5, 3, 3)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_gradient_wrt_filters(self):
        rng = np.random.default_rng(9)
        images = rng.normal(size=(1, 4, 4))
        filters = rng.normal(size=(2, 2, 2))
        w = rng.normal(size=(1, 3, 3, 2))
        check_gradient(
            lambda n: T.reduce_sum(T.mul(correlate_patches(images, n, 2, 2), w)),
            filters,
            rtol=1e-6,
            atol=1e-8,
        )


@pytest.mark.skipif(_corr is None, reason="compiled extension not built")
class TestBackendAgreement:
    def test_correlate_valid_matches(self):
        rng = np.random.default_rng(10)
        images = rng.normal(size=(3, 9, 8))
        filters = rng.normal(size=(4, 3, 2))
        fast = _corr.correlate_valid(images, filters)
        slow = _fallback.correlate_valid(images, filters)
        np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-12)

    def test_adjoint_matches(self):
        rng = np.random.default_rng(11)
        images = rng.normal(size=(2, 6, 6))
        grad_out = rng.normal(size=(2, 4, 5, 3))
        fast = _corr.correlate_valid_adjoint_filters(images, grad_out, 3, 2)
        slow = _fallback.correlate_valid_adjoint_filters(images, grad_out, 3, 2)
        np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-12)
