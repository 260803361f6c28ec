"""Tests for the sparse variational posterior and evidence lower bound.

Oracles use explicit matrix inverses and dense assembly (np.linalg.inv,
slogdet, scipy block_diag), deliberately avoiding the solve-based routines
under test.
"""

import numpy as np
import pytest
from scipy.linalg import block_diag

from helpers import random_spd
from patchgp import svgp
from patchgp import tape as T
from patchgp.errors import (
    BlockMismatch,
    DimensionMismatch,
    NotPositiveDefinite,
)
from patchgp.kernels import RbfParams, kernel_matrix
from patchgp.likelihoods import LikelihoodSpec, variational_expectations
from patchgp.svgp import (
    VariationalGaussian,
    kl_blocked,
    kl_gaussian,
    predict_marginals,
    predict_marginals_blocked,
)


def oracle_marginals(kfu, kuu, kff_diag, m, l):
    """mu = K_fu K^-1 m,  var = kff + diag(K_fu K^-1 (S - K) K^-1 K_uf)."""
    kinv = np.linalg.inv(kuu)
    s = l @ l.T
    mu = kfu @ kinv @ m
    var = kff_diag + np.diag(kfu @ kinv @ (s - kuu) @ kinv @ kfu.T)
    return mu, var


def oracle_kl(m, l, kuu):
    """0.5 (tr(K^-1 S) + m^T K^-1 m - M + log|K| - log|S|)."""
    s = l @ l.T
    kinv = np.linalg.inv(kuu)
    logdet_k = np.linalg.slogdet(kuu)[1]
    logdet_s = np.linalg.slogdet(s)[1]
    return 0.5 * (np.trace(kinv @ s) + m @ kinv @ m - len(m) + logdet_k - logdet_s)


def random_lower(size, seed, block_sizes=None, scale=0.3):
    """Random valid Cholesky-like factor, block-diagonal when sizes given."""
    rng = np.random.default_rng(seed)
    l = np.tril(rng.normal(size=(size, size)) * scale)
    l[np.diag_indices(size)] = rng.random(size) + 0.5
    if block_sizes is not None:
        mask = block_diag(*[np.ones((b, b)) for b in block_sizes])
        l = l * mask
    return l


class TestVariationalGaussian:
    def test_m_must_be_a_vector(self):
        with pytest.raises(DimensionMismatch):
            VariationalGaussian(np.zeros((3, 1)), np.eye(3))

    def test_l_shape_must_match_m(self):
        with pytest.raises(DimensionMismatch):
            VariationalGaussian(np.zeros(3), np.eye(4))

    def test_l_must_be_lower_triangular_with_positive_diagonal(self):
        bad = np.eye(3)
        bad[0, 2] = 0.5
        with pytest.raises(DimensionMismatch):
            VariationalGaussian(np.zeros(3), bad)
        with pytest.raises(NotPositiveDefinite):
            VariationalGaussian(np.zeros(3), np.diag([1.0, -1.0, 1.0]))

    def test_block_sizes_must_sum_to_m(self):
        with pytest.raises(BlockMismatch):
            VariationalGaussian(np.zeros(5), np.eye(5), block_sizes=[2, 2])

    def test_mean_field_requires_block_diagonal_l(self):
        l = random_lower(5, 0)
        with pytest.raises(BlockMismatch):
            VariationalGaussian(np.zeros(5), l, block_sizes=[2, 3], mean_field=True)
        l_bd = random_lower(5, 0, block_sizes=[2, 3])
        VariationalGaussian(np.zeros(5), l_bd, block_sizes=[2, 3], mean_field=True)


class TestPredictMarginals:
    def test_prior_q_recovers_prior_marginals(self):
        kuu = random_spd(6, seed=0)
        rng = np.random.default_rng(1)
        kfu = rng.normal(size=(4, 6))
        kff = rng.random(4) + 1.0
        q = VariationalGaussian(np.zeros(6), np.linalg.cholesky(kuu))
        marg = predict_marginals(kfu, kuu, kff, q)
        # With q equal to the prior, S - K_uu vanishes and the posterior
        # over f is the prior: mean zero, variance kff.
        assert np.max(np.abs(marg.mu_value)) <= 1e-10
        assert np.allclose(marg.var_value, kff, rtol=1e-10)
        assert marg.clamp_count == 0

    def test_matches_explicit_inverse_oracle(self):
        kuu = random_spd(7, seed=2)
        rng = np.random.default_rng(3)
        kfu = rng.normal(size=(5, 7))
        kff = rng.random(5) + 2.0
        m = rng.normal(size=7)
        l = random_lower(7, 4)
        marg = predict_marginals(kfu, kuu, kff, VariationalGaussian(m, l))
        mu_want, var_want = oracle_marginals(kfu, kuu, kff, m, l)
        assert np.allclose(marg.mu_value, mu_want, rtol=1e-9, atol=1e-12)
        assert np.allclose(marg.var_value, var_want, rtol=1e-9, atol=1e-12)

    def test_variance_floor_clamps_and_counts(self):
        # kff of zero with a tiny q covariance forces raw variances below
        # the floor; they must be clamped, not returned negative.
        kuu = np.eye(3)
        kfu = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0]])
        q = VariationalGaussian(np.zeros(3), 1e-7 * np.eye(3))
        marg = predict_marginals(kfu, kuu, np.zeros(2), q)
        assert np.array_equal(marg.var_value, np.full(2, 1e-12))
        assert marg.clamp_count == 2

    def test_kfu_width_must_match_inducing_count(self):
        q = VariationalGaussian(np.zeros(3), np.eye(3))
        with pytest.raises(DimensionMismatch):
            predict_marginals(np.zeros((2, 4)), np.eye(3), np.ones(2), q)

    def test_multi_block_q_is_rejected(self):
        q = VariationalGaussian(np.zeros(4), np.eye(4), block_sizes=[2, 2])
        with pytest.raises(BlockMismatch):
            predict_marginals(np.zeros((2, 4)), np.eye(4), np.ones(2), q)


class TestBlockedMarginals:
    def _blocks(self, sizes, seed, n=6):
        rng = np.random.default_rng(seed)
        kuu_blocks = [random_spd(b, seed=seed + 10 + i) for i, b in enumerate(sizes)]
        kfu_blocks = [rng.normal(size=(n, b)) for b in sizes]
        kff = rng.random(n) + 3.0
        return kfu_blocks, kuu_blocks, kff

    def test_single_block_equals_dense_bitwise(self):
        kfu_blocks, kuu_blocks, kff = self._blocks([5], seed=5)
        m = np.random.default_rng(6).normal(size=5)
        l = random_lower(5, 7)
        dense = predict_marginals(kfu_blocks[0], kuu_blocks[0], kff, VariationalGaussian(m, l))
        blocked = predict_marginals_blocked(
            kfu_blocks, kuu_blocks, kff, VariationalGaussian(m, l, block_sizes=[5])
        )
        assert np.array_equal(dense.mu_value, blocked.mu_value)
        assert np.array_equal(dense.var_value, blocked.var_value)

    @pytest.mark.parametrize("sizes", [[4, 3], [3, 2, 4]])
    @pytest.mark.parametrize("mean_field", [False, True])
    def test_blocked_matches_dense_assembly(self, sizes, mean_field):
        total = sum(sizes)
        kfu_blocks, kuu_blocks, kff = self._blocks(sizes, seed=8)
        rng = np.random.default_rng(9)
        m = rng.normal(size=total)
        l = random_lower(total, 10, block_sizes=sizes if mean_field else None)
        q_blocked = VariationalGaussian(m, l, block_sizes=sizes, mean_field=mean_field)
        blocked = predict_marginals_blocked(kfu_blocks, kuu_blocks, kff, q_blocked)

        kfu_dense = np.concatenate(kfu_blocks, axis=1)
        kuu_dense = block_diag(*kuu_blocks)
        dense = predict_marginals(kfu_dense, kuu_dense, kff, VariationalGaussian(m, l))
        assert np.allclose(blocked.mu_value, dense.mu_value, rtol=1e-9, atol=1e-12)
        assert np.allclose(blocked.var_value, dense.var_value, rtol=1e-9, atol=1e-12)

    def test_block_count_mismatch_raises(self):
        kfu_blocks, kuu_blocks, kff = self._blocks([4, 3], seed=11)
        q = VariationalGaussian(np.zeros(7), np.eye(7), block_sizes=[4, 3])
        with pytest.raises(BlockMismatch):
            predict_marginals_blocked(kfu_blocks[:1], kuu_blocks, kff, q)
        with pytest.raises(BlockMismatch):
            predict_marginals_blocked(kfu_blocks, kuu_blocks[:1], kff, q)


class TestKl:
    def test_matches_explicit_oracle(self):
        for seed in range(3):
            kuu = random_spd(6, seed=20 + seed)
            rng = np.random.default_rng(30 + seed)
            m = rng.normal(size=6)
            l = random_lower(6, 40 + seed)
            got = float(T.value_of(kl_gaussian(VariationalGaussian(m, l), kuu)))
            assert np.isclose(got, oracle_kl(m, l, kuu), rtol=1e-9, atol=1e-12)

    def test_nonnegative_over_random_q(self):
        kuu = random_spd(5, seed=50)
        rng = np.random.default_rng(51)
        for _ in range(20):
            m = rng.normal(size=5)
            l = random_lower(5, rng.integers(1 << 30))
            got = float(T.value_of(kl_gaussian(VariationalGaussian(m, l), kuu)))
            assert got >= -1e-10

    def test_zero_at_the_prior(self):
        kuu = random_spd(6, seed=52)
        q = VariationalGaussian(np.zeros(6), np.linalg.cholesky(kuu))
        assert abs(float(T.value_of(kl_gaussian(q, kuu)))) <= 1e-9

    def test_blocked_single_block_matches_dense(self):
        kuu = random_spd(5, seed=53)
        rng = np.random.default_rng(54)
        m = rng.normal(size=5)
        l = random_lower(5, 55)
        dense = float(T.value_of(kl_gaussian(VariationalGaussian(m, l), kuu)))
        blocked = float(
            T.value_of(kl_blocked(VariationalGaussian(m, l, block_sizes=[5]), [kuu]))
        )
        assert abs(dense - blocked) <= 1e-12

    @pytest.mark.parametrize("mean_field", [False, True])
    def test_blocked_matches_dense_assembly(self, mean_field):
        sizes = [3, 2, 4]
        total = sum(sizes)
        kuu_blocks = [random_spd(b, seed=60 + i) for i, b in enumerate(sizes)]
        rng = np.random.default_rng(61)
        m = rng.normal(size=total)
        l = random_lower(total, 62, block_sizes=sizes if mean_field else None)
        q = VariationalGaussian(m, l, block_sizes=sizes, mean_field=mean_field)
        got = float(T.value_of(kl_blocked(q, kuu_blocks)))
        want = oracle_kl(m, l, block_diag(*kuu_blocks))
        assert np.isclose(got, want, rtol=1e-9, atol=1e-12)

    def test_block_count_mismatch_raises(self):
        q = VariationalGaussian(np.zeros(5), np.eye(5), block_sizes=[3, 2])
        with pytest.raises(BlockMismatch):
            kl_blocked(q, [np.eye(3)])


class _ToyModel:
    """Index-addressed SVGP pieces with a Gaussian likelihood for elbo()."""

    def __init__(self, kfu, kuu, kff, q, noise):
        self.kfu = kfu
        self.kuu = kuu
        self.kff = kff
        self.q = q
        self.noise_variance = noise
        self.likelihood = LikelihoodSpec("gaussian", noise_variance=noise)

    def batch_marginals(self, x_batch):
        idx = np.asarray(x_batch, dtype=int)
        marg = predict_marginals(self.kfu[idx], self.kuu, self.kff[idx], self.q)
        return [marg], kl_gaussian(self.q, self.kuu)


class TestElboAgainstEvidence:
    noise = 0.1
    params = RbfParams(variance=1.2, lengthscales=0.35)

    def _toy(self):
        x = np.linspace(0.0, 1.0, 10).reshape(10, 1)
        y = np.sin(3.0 * x[:, 0]) + 0.05 * np.cos(17.0 * x[:, 0])
        k = kernel_matrix(x, None, self.params)
        return x, y, k

    def _evidence(self, y, k):
        a = k + self.noise * np.eye(len(y))
        quad = y @ np.linalg.solve(a, y)
        return -0.5 * (quad + np.linalg.slogdet(a)[1] + len(y) * np.log(2.0 * np.pi))

    def _elbo(self, k, kff, y, q):
        marg = predict_marginals(k, k, kff, q)
        ve = variational_expectations(
            LikelihoodSpec("gaussian", noise_variance=self.noise), [marg], y
        )
        return float(np.sum(T.value_of(ve)) - T.value_of(kl_gaussian(q, k)))

    def test_optimal_q_at_z_equals_x_attains_the_evidence(self):
        # With inducing inputs equal to the training inputs, the bound is
        # tight at q(u) = p(u | y): m = K (K + noise I)^-1 y and
        # S = K - K (K + noise I)^-1 K.
        _, y, k = self._toy()
        a = k + self.noise * np.eye(10)
        m_opt = k @ np.linalg.solve(a, y)
        s_opt = k - k @ np.linalg.solve(a, k)
        s_opt = 0.5 * (s_opt + s_opt.T)
        q = VariationalGaussian(m_opt, np.linalg.cholesky(s_opt))
        kff = np.full(10, self.params.variance)
        elbo = self._elbo(k, kff, y, q)
        assert abs(elbo - self._evidence(y, k)) <= 1e-6

    def test_bound_never_exceeds_the_evidence(self):
        _, y, k = self._toy()
        kff = np.full(10, self.params.variance)
        evidence = self._evidence(y, k)
        rng = np.random.default_rng(70)
        for _ in range(50):
            m = rng.normal(size=10)
            l = random_lower(10, rng.integers(1 << 30))
            elbo = self._elbo(k, kff, y, VariationalGaussian(m, l))
            assert elbo <= evidence + 1e-9

    def test_elbo_scales_minibatch_term_to_the_dataset_size(self):
        _, y, k = self._toy()
        kff = np.full(10, self.params.variance)
        rng = np.random.default_rng(71)
        m = rng.normal(size=10)
        l = random_lower(10, 72)
        q = VariationalGaussian(m, l)
        model = _ToyModel(k, k, kff, q, self.noise)
        idx = np.arange(10)

        full = float(T.value_of(svgp.elbo(model, idx, y, total_n=10)))
        assert np.isclose(full, self._elbo(k, kff, y, q), rtol=1e-12)

        kl = float(T.value_of(kl_gaussian(q, k)))
        doubled = float(T.value_of(svgp.elbo(model, idx, y, total_n=20)))
        assert np.isclose(doubled + kl, 2.0 * (full + kl), rtol=1e-9)

        # A half batch with total_n = 10 estimates the same data term.
        half = float(T.value_of(svgp.elbo(model, idx[:5], y[:5], total_n=10)))
        marg = predict_marginals(k[:5], k, kff[:5], q)
        ve = variational_expectations(
            LikelihoodSpec("gaussian", noise_variance=self.noise), [marg], y[:5]
        )
        assert np.isclose(half, 2.0 * float(np.sum(T.value_of(ve))) - kl, rtol=1e-12)
