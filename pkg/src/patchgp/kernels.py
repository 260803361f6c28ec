"""Squared-exponential base kernel over flat vectors.

The kernel contract used by the convolutional variants: a stationary base
exposes its Gram/diag through squared distances, and an isotropic one may
have those distances computed on raw (unscaled) inputs and normalized by
the lengthscale afterwards, which is what enables the correlation fast
path. ARD lengthscales scale each input dimension upstream and force the
direct path.
"""

from __future__ import annotations

import numpy as np

from . import tape as T
from .errors import DimensionMismatch, NegativeDistance


class RbfParams:
    """Variance and lengthscale(s) of a squared-exponential kernel.

    Fields may be Nodes during training or plain arrays during evaluation.
    lengthscales is a scalar for the isotropic kernel or a vector matching
    the input dimension for ARD.
    """

    stationary = True

    def __init__(self, variance, lengthscales):
        self.variance = variance
        self.lengthscales = lengthscales

    @property
    def is_isotropic(self) -> bool:
        return T.value_of(self.lengthscales).size == 1


def rbf_from_sq_dist(d2, params: RbfParams):
    """variance * exp(-d2 / 2) for lengthscale-normalized squared distances."""
    d2v = T.value_of(d2)
    if d2v.size and float(d2v.min()) < 0.0:
        raise NegativeDistance(f"min squared distance {d2v.min():.3e} < 0")
    return T.mul(params.variance, T.exp(T.mul(-0.5, d2)))


def scale_inputs(x, params: RbfParams):
    """x divided by the lengthscale(s); broadcasts for ARD vectors."""
    return T.div(x, params.lengthscales)


def sq_dist(xa, xb):
    """Pairwise squared distances between rows of xa (n,e) and xb (m,e),
    clamped at 0 against rounding."""
    av, bv = T.value_of(xa), T.value_of(xb)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise DimensionMismatch(f"expected (n,e) and (m,e), got {av.shape} vs {bv.shape}")
    n, m = av.shape[0], bv.shape[0]
    sa = T.reshape(T.reduce_sum(T.mul(xa, xa), axis=1), (n, 1))
    sb = T.reshape(T.reduce_sum(T.mul(xb, xb), axis=1), (1, m))
    cross = T.matmul(xa, T.transpose(xb))
    d2 = T.add(T.sub(sa, T.mul(2.0, cross)), sb)
    return T.clamp_min(d2, 0.0)


def sq_dist_sym(xa):
    """Squared distances among rows of xa, exactly symmetric with an exactly
    zero diagonal.

    The cross-product matrix is symmetrized as (G + G^T)/2 before assembly
    (floating-point addition is commutative, so the result is bitwise
    symmetric) and the diagonal is masked to zero, which is the exact value.
    """
    av = T.value_of(xa)
    if av.ndim != 2:
        raise DimensionMismatch(f"expected (n,e), got {av.shape}")
    n = av.shape[0]
    s = T.reduce_sum(T.mul(xa, xa), axis=1)
    g = T.matmul(xa, T.transpose(xa))
    g_sym = T.mul(0.5, T.add(g, T.transpose(g)))
    # (s_i + s_j) first: commutative addition keeps the matrix bitwise symmetric
    d2 = T.sub(T.add(T.reshape(s, (n, 1)), T.reshape(s, (1, n))), T.mul(2.0, g_sym))
    off_diag = 1.0 - np.eye(n)
    return T.clamp_min(T.mul(d2, off_diag), 0.0)


def kernel_matrix(xa, xb, params: RbfParams):
    """Gram matrix [i, j] = k(xa_i, xb_j).

    Pass xb=None (or the same object as xa) for the symmetric case; the
    result is then exactly symmetric with variance on the diagonal.
    """
    xa_s = scale_inputs(xa, params)
    if xb is None or xb is xa:
        return rbf_from_sq_dist(sq_dist_sym(xa_s), params)
    xb_s = scale_inputs(xb, params)
    return rbf_from_sq_dist(sq_dist(xa_s, xb_s), params)


def kernel_diag(xa, params: RbfParams):
    """Vector of k(x_i, x_i); constant variance for a stationary kernel."""
    n = T.value_of(xa).shape[0]
    return T.mul(params.variance, np.ones(n))
