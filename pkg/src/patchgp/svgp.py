"""Sparse variational GP core: q(u), predictive marginals, KL terms, ELBO.

The posterior over inducing outputs is q(u) = N(m, S) with S = l l^T.
Predictive marginals follow

    mu_i     = k_fu(x_i) K_uu^-1 m
    sigma_i^2 = k_ff(x_i) + k_fu(x_i) K_uu^-1 (S - K_uu) K_uu^-1 k_uf(x_i)

computed through Cholesky factors and triangular solves only. The blocked
forms treat K_uu as block-diagonal over groups of inducing variables and
never factor anything larger than one block, so cost scales with the block
size rather than the total inducing count.

Everything here is polymorphic over plain arrays and tape nodes; passing
nodes yields differentiable outputs.
"""

from __future__ import annotations

import numpy as np

from . import likelihoods
from . import tape as T
from .errors import BlockMismatch, DimensionMismatch, NotPositiveDefinite
from .linalg import log_determinant, robust_cholesky, triangular_solve

VAR_FLOOR = 1e-12

INDUCING_DOMAINS = ("image-points", "patches", "blocked")


def block_slices(sizes):
    """Index ranges of consecutive blocks with the given sizes."""
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    return [slice(int(offsets[i]), int(offsets[i + 1])) for i in range(len(sizes))]


class VariationalGaussian:
    """q(u) = N(m, l l^T) with optional block structure over u.

    block_sizes partitions the inducing variables into consecutive groups;
    mean_field additionally declares l block-diagonal (no posterior
    correlation across groups).
    """

    def __init__(self, m, l, block_sizes=None, mean_field: bool = False):
        mv = T.value_of(m)
        lv = T.value_of(l)
        if mv.ndim != 1:
            raise DimensionMismatch(f"m must be a vector, got shape {mv.shape}")
        if lv.ndim != 2 or lv.shape[0] != lv.shape[1] or lv.shape[0] != mv.shape[0]:
            raise DimensionMismatch(f"l shape {lv.shape} does not match m size {mv.shape[0]}")
        total = mv.shape[0]
        if block_sizes is None:
            block_sizes = [total]
        block_sizes = [int(b) for b in block_sizes]
        if sum(block_sizes) != total:
            raise BlockMismatch(f"block sizes {block_sizes} do not sum to {total}")
        if np.any(np.triu(lv, 1) != 0.0):
            raise DimensionMismatch("l must be lower triangular")
        if np.any(np.diag(lv) <= 0.0):
            raise NotPositiveDefinite("l needs a strictly positive diagonal")
        slices = block_slices(block_sizes)
        if mean_field:
            off = lv.copy()
            for sl in slices:
                off[sl, sl] = 0.0
            if np.any(off != 0.0):
                raise BlockMismatch("mean_field requires l to be block-diagonal")
        self.m = m
        self.l = l
        self.block_sizes = block_sizes
        self.mean_field = bool(mean_field)
        self.slices = slices

    @property
    def num_inducing(self) -> int:
        return int(T.value_of(self.m).shape[0])

    @property
    def m_value(self) -> np.ndarray:
        return T.value_of(self.m)

    @property
    def l_value(self) -> np.ndarray:
        return T.value_of(self.l)


class InducingSet:
    """Inducing inputs plus the domain they live in.

    inputs is one matrix, or a list of per-block matrices when domain is
    "blocked" (blocks may live in different spaces, e.g. images + patches).
    """

    def __init__(self, domain: str, inputs, block_sizes=None):
        if domain not in INDUCING_DOMAINS:
            raise DimensionMismatch(f"unknown inducing domain {domain!r}")
        self.domain = domain
        self.inputs = inputs
        if block_sizes is None:
            if isinstance(inputs, (list, tuple)):
                block_sizes = [T.value_of(z).shape[0] for z in inputs]
            else:
                block_sizes = [T.value_of(inputs).shape[0]]
        self.block_sizes = [int(b) for b in block_sizes]

    @property
    def num_inducing(self) -> int:
        return sum(self.block_sizes)


class PredictiveMarginal:
    """Per-point posterior mean and variance, with clamp instrumentation.

    clamp_count records how many raw variances fell below the 1e-12 floor
    before clamping; well-conditioned problems should report zero.
    """

    def __init__(self, mu, var, clamp_count: int):
        self.mu = mu
        self.var = var
        self.clamp_count = int(clamp_count)

    @property
    def mu_value(self) -> np.ndarray:
        return T.value_of(self.mu)

    @property
    def var_value(self) -> np.ndarray:
        return T.value_of(self.var)


def _finish_marginal(mu, var_raw) -> PredictiveMarginal:
    clamp_count = int(np.sum(T.value_of(var_raw) < VAR_FLOOR))
    return PredictiveMarginal(mu, T.clamp_min(var_raw, VAR_FLOOR), clamp_count)


def predict_marginals(kfu, kuu, kff_diag, q: VariationalGaussian) -> PredictiveMarginal:
    """Posterior marginals with a single dense K_uu."""
    if len(q.block_sizes) != 1:
        raise BlockMismatch("predict_marginals needs a single-block q")
    kfu_v = T.value_of(kfu)
    m_total = q.num_inducing
    if kfu_v.ndim != 2 or kfu_v.shape[1] != m_total:
        raise DimensionMismatch(f"kfu shape {kfu_v.shape} does not match M={m_total}")
    n = kfu_v.shape[0]
    factor = robust_cholesky(kuu)
    a = triangular_solve(factor, T.transpose(kfu), transpose_flag=False)
    b = triangular_solve(factor, a, transpose_flag=True)
    mu = T.reshape(T.matmul(T.transpose(b), T.reshape(q.m, (m_total, 1))), (n,))
    w = T.matmul(T.transpose(q.l), b)
    s_term = T.reduce_sum(T.mul(w, w), axis=0)
    prior_term = T.reduce_sum(T.mul(a, a), axis=0)
    var_raw = T.sub(T.add(kff_diag, s_term), prior_term)
    return _finish_marginal(mu, var_raw)


def predict_marginals_blocked(
    kfu_blocks, kuu_blocks, kff_diag, q: VariationalGaussian
) -> PredictiveMarginal:
    """Posterior marginals with K_uu block-diagonal over inducing groups.

    Only per-block factorizations are formed. With mean_field the S term
    decomposes per block; otherwise the stacked solves contract against the
    full l once, still without factoring anything beyond block size.
    """
    sizes = q.block_sizes
    if len(kfu_blocks) != len(sizes) or len(kuu_blocks) != len(sizes):
        raise BlockMismatch(
            f"{len(kfu_blocks)} kfu blocks, {len(kuu_blocks)} kuu blocks, "
            f"{len(sizes)} q blocks"
        )
    n = T.value_of(kfu_blocks[0]).shape[0]
    mu_col = None
    prior_term = None
    s_term = None
    b_blocks = []
    for c, sl in enumerate(q.slices):
        kuu_v = T.value_of(kuu_blocks[c])
        kfu_v = T.value_of(kfu_blocks[c])
        if kuu_v.shape != (sizes[c], sizes[c]):
            raise BlockMismatch(f"kuu block {c} shape {kuu_v.shape} != size {sizes[c]}")
        if kfu_v.ndim != 2 or kfu_v.shape != (n, sizes[c]):
            raise BlockMismatch(f"kfu block {c} shape {kfu_v.shape} != ({n}, {sizes[c]})")
        factor = robust_cholesky(kuu_blocks[c])
        a_c = triangular_solve(factor, T.transpose(kfu_blocks[c]), transpose_flag=False)
        b_c = triangular_solve(factor, a_c, transpose_flag=True)
        m_c = T.reshape(T.getitem(q.m, sl), (sizes[c], 1))
        mu_c = T.matmul(T.transpose(b_c), m_c)
        mu_col = mu_c if mu_col is None else T.add(mu_col, mu_c)
        p_c = T.reduce_sum(T.mul(a_c, a_c), axis=0)
        prior_term = p_c if prior_term is None else T.add(prior_term, p_c)
        if q.mean_field:
            l_cc = T.getitem(q.l, (sl, sl))
            w_c = T.matmul(T.transpose(l_cc), b_c)
            s_c = T.reduce_sum(T.mul(w_c, w_c), axis=0)
            s_term = s_c if s_term is None else T.add(s_term, s_c)
        else:
            b_blocks.append(b_c)
    if not q.mean_field:
        b_stack = b_blocks[0] if len(b_blocks) == 1 else T.concat(b_blocks, axis=0)
        w = T.matmul(T.transpose(q.l), b_stack)
        s_term = T.reduce_sum(T.mul(w, w), axis=0)
    mu = T.reshape(mu_col, (n,))
    var_raw = T.sub(T.add(kff_diag, s_term), prior_term)
    return _finish_marginal(mu, var_raw)


def kl_gaussian(q: VariationalGaussian, kuu):
    """KL[q(u) || N(0, K_uu)] for a single dense block."""
    if len(q.block_sizes) != 1:
        raise BlockMismatch("kl_gaussian needs a single-block q")
    m_total = q.num_inducing
    factor = robust_cholesky(kuu)
    c = triangular_solve(factor, q.l, transpose_flag=False)
    trace_term = T.reduce_sum(T.mul(c, c))
    alpha = triangular_solve(factor, T.reshape(q.m, (m_total, 1)), transpose_flag=False)
    quad_term = T.reduce_sum(T.mul(alpha, alpha))
    logdet_k = log_determinant(factor)
    logdet_s = T.mul(2.0, T.reduce_sum(T.log(T.diag_part(q.l))))
    inner = T.add(T.add(trace_term, quad_term), T.sub(logdet_k, logdet_s))
    return T.mul(0.5, T.sub(inner, float(m_total)))


def kl_blocked(q: VariationalGaussian, kuu_blocks):
    """KL[q(u) || N(0, blockdiag(K_uu))] factoring only per-block matrices.

    tr(K_cc^-1 S_cc) uses the row block l[c, :] of the full factor, since
    S_cc = l[c, :] l[c, :]^T whether or not q is mean-field.
    """
    sizes = q.block_sizes
    if len(kuu_blocks) != len(sizes):
        raise BlockMismatch(f"{len(kuu_blocks)} kuu blocks for {len(sizes)} q blocks")
    trace_term = None
    quad_term = None
    logdet_k = None
    for c, sl in enumerate(q.slices):
        kuu_v = T.value_of(kuu_blocks[c])
        if kuu_v.shape != (sizes[c], sizes[c]):
            raise BlockMismatch(f"kuu block {c} shape {kuu_v.shape} != size {sizes[c]}")
        factor = robust_cholesky(kuu_blocks[c])
        l_rows = T.getitem(q.l, (sl, slice(None)))
        c_sol = triangular_solve(factor, l_rows, transpose_flag=False)
        t_c = T.reduce_sum(T.mul(c_sol, c_sol))
        trace_term = t_c if trace_term is None else T.add(trace_term, t_c)
        m_c = T.reshape(T.getitem(q.m, sl), (sizes[c], 1))
        alpha = triangular_solve(factor, m_c, transpose_flag=False)
        q_c = T.reduce_sum(T.mul(alpha, alpha))
        quad_term = q_c if quad_term is None else T.add(quad_term, q_c)
        ld_c = log_determinant(factor)
        logdet_k = ld_c if logdet_k is None else T.add(logdet_k, ld_c)
    logdet_s = T.mul(2.0, T.reduce_sum(T.log(T.diag_part(q.l))))
    inner = T.add(T.add(trace_term, quad_term), T.sub(logdet_k, logdet_s))
    return T.mul(0.5, T.sub(inner, float(q.num_inducing)))


def elbo(model, x_batch, y_batch, total_n: int):
    """Minibatch evidence lower bound, scaled to the full dataset size.

    model must provide batch_marginals(x_batch) -> (marginals per latent,
    KL) and a likelihood description consumable by the likelihoods module.
    """
    marginals, kl = model.batch_marginals(x_batch)
    ve = likelihoods.variational_expectations(
        model.likelihood, marginals, y_batch, noise_variance=model.noise_variance
    )
    batch_n = int(np.asarray(y_batch).shape[0])
    scale = float(total_n) / float(batch_n)
    return T.sub(T.mul(scale, T.reduce_sum(ve)), kl)
