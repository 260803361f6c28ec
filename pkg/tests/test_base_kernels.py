"""Squared-exponential base kernel: values, symmetry, PSD, and gradients.

The entrywise scalar oracle evaluates v * exp(-0.5 * sum(((x-y)/l)^2))
directly per pair, independent of the vectorized Gram assembly.
"""

import numpy as np
import pytest
from helpers import check_gradient

import patchgp.tape as T
from patchgp.errors import DimensionMismatch, NegativeDistance
from patchgp.kernels import RbfParams, kernel_diag, kernel_matrix, rbf_from_sq_dist


def scalar_rbf(x, y, variance, lengthscales):
    diff = (np.asarray(x) - np.asarray(y)) / np.asarray(lengthscales)
    return variance * np.exp(-0.5 * float(np.dot(diff, diff)))


class TestRbfFromSqDist:
    def test_zero_distance_gives_variance(self):
        got = T.value_of(rbf_from_sq_dist(np.zeros((2, 2)), RbfParams(1.7, np.array([1.0]))))
        np.testing.assert_array_equal(got, 1.7 * np.ones((2, 2)))

    def test_distance_two_gives_inverse_e(self):
        got = T.value_of(rbf_from_sq_dist(np.array([2.0]), RbfParams(1.0, np.array([1.0]))))
        assert got[0] == pytest.approx(np.exp(-1.0), abs=1e-15)

    def test_negative_distance_rejected(self):
        with pytest.raises(NegativeDistance):
            rbf_from_sq_dist(np.array([-1e-3]), RbfParams(1.0, np.array([1.0])))

    def test_gram_psd(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 9))
        k = T.value_of(kernel_matrix(x, None, RbfParams(1.3, np.array([0.8]))))
        eigs = np.linalg.eigvalsh(k)
        assert eigs.min() >= -1e-8 * eigs.max()


class TestKernelMatrix:
    def test_single_point(self):
        x = np.array([[0.3, -0.2]])
        k = T.value_of(kernel_matrix(x, None, RbfParams(2.2, np.array([1.0]))))
        np.testing.assert_allclose(k, [[2.2]], rtol=0, atol=1e-15)

    def test_two_points_scaled_distance_two(self):
        lengthscale = 0.7
        x = np.array([[0.0], [np.sqrt(2.0) * lengthscale]])
        k = T.value_of(kernel_matrix(x, None, RbfParams(1.5, np.array([lengthscale]))))
        assert k[0, 1] == pytest.approx(1.5 * np.exp(-1.0), rel=1e-12)

    def test_gram_vs_scalar_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 3))
        params = RbfParams(0.9, np.array([1.4]))
        k = T.value_of(kernel_matrix(x, None, params))
        for i in range(5):
            for j in range(5):
                assert k[i, j] == pytest.approx(
                    scalar_rbf(x[i], x[j], 0.9, 1.4), rel=1e-12, abs=1e-15
                )

    def test_cross_vs_scalar_oracle(self):
        rng = np.random.default_rng(2)
        xa = rng.normal(size=(4, 3))
        xb = rng.normal(size=(6, 3))
        params = RbfParams(1.1, np.array([0.6, 1.0, 1.9]))
        k = T.value_of(kernel_matrix(xa, xb, params))
        assert k.shape == (4, 6)
        for i in range(4):
            for j in range(6):
                assert k[i, j] == pytest.approx(
                    scalar_rbf(xa[i], xb[j], 1.1, np.array([0.6, 1.0, 1.9])),
                    rel=1e-12,
                    abs=1e-15,
                )

    def test_symmetric_gram_is_bitwise_symmetric(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(7, 5))
        k = T.value_of(kernel_matrix(x, None, RbfParams(1.0, np.array([1.2]))))
        assert np.array_equal(k, k.T)
        np.testing.assert_array_equal(np.diag(k), np.full(7, 1.0))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            kernel_matrix(np.zeros((2, 3)), np.zeros((2, 4)), RbfParams(1.0, np.array([1.0])))

    def test_ard_equal_lengthscales_matches_isotropic(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 4))
        iso = T.value_of(kernel_matrix(x, None, RbfParams(1.0, np.array([1.3]))))
        ard = T.value_of(kernel_matrix(x, None, RbfParams(1.0, np.full(4, 1.3))))
        np.testing.assert_allclose(ard, iso, rtol=0, atol=1e-12)


class TestKernelDiag:
    def test_constant_variance(self):
        got = T.value_of(kernel_diag(np.random.default_rng(5).normal(size=(4, 3)),
                                      RbfParams(2.5, np.array([1.0]))))
        np.testing.assert_array_equal(got, [2.5, 2.5, 2.5, 2.5])

    def test_agrees_with_full_matrix(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5, 2))
        params = RbfParams(1.8, np.array([0.9]))
        diag = T.value_of(kernel_diag(x, params))
        full = np.diag(T.value_of(kernel_matrix(x, None, params)))
        np.testing.assert_array_equal(diag, full)


class TestKernelGradients:
    def test_wrt_inputs_cross_and_symmetric(self):
        rng = np.random.default_rng(7)
        xa = rng.normal(size=(3, 2))
        xb = rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 4))
        params = RbfParams(1.2, np.array([0.8]))
        check_gradient(
            lambda n: T.reduce_sum(T.mul(kernel_matrix(n, xb, params), w)), xa
        )
        check_gradient(
            lambda n: T.reduce_sum(T.mul(kernel_matrix(xa, n, params), w)), xb
        )
        ws = rng.normal(size=(3, 3))
        check_gradient(
            lambda n: T.reduce_sum(T.mul(kernel_matrix(n, None, params), ws)), xa
        )

    def test_wrt_hyperparameters(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(4, 4))
        check_gradient(
            lambda n: T.reduce_sum(
                T.mul(kernel_matrix(x, None, RbfParams(T.softplus(n), np.array([1.1]))), w)
            ),
            np.array(0.4),
        )
        check_gradient(
            lambda n: T.reduce_sum(
                T.mul(kernel_matrix(x, None, RbfParams(1.3, T.softplus(n))), w)
            ),
            np.array([0.2, -0.1, 0.5]),
        )
        check_gradient(
            lambda n: T.reduce_sum(T.mul(kernel_diag(x, RbfParams(T.softplus(n), np.array([1.0]))), np.arange(4.0))),
            np.array(0.7),
        )
