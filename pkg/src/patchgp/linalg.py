"""Dense factorizations and solves, differentiable through the tape.

robust_cholesky adds escalating diagonal jitter (1e-6 to 1e-2 relative to
the mean diagonal, factors of 10) before giving up, so ill-conditioned
covariance matrices fail loudly rather than silently. The adjoint formulas
for the Cholesky factor and triangular solves are the standard ones (Giles
2008; Murray 2016).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from . import tape as T
from .errors import DimensionMismatch, NotPositiveDefinite, NotSymmetric

JITTER_START = 1e-6
JITTER_MAX = 1e-2
SYMMETRY_RTOL = 1e-10


class CholeskyFactor:
    """Lower-triangular factor plus the jitter that was needed to get it.

    l may be a Node (differentiable) or a plain array; l l^T reconstructs
    the input plus jitter_used times the identity.
    """

    def __init__(self, l, jitter_used: float):
        self.l = l
        self.jitter_used = float(jitter_used)

    @property
    def shape(self):
        return T.value_of(self.l).shape


def _phi_lower_half_diag(m: np.ndarray) -> np.ndarray:
    """Lower triangle of m with the diagonal halved."""
    out = np.tril(m)
    idx = np.arange(m.shape[-1])
    out[..., idx, idx] *= 0.5
    return out


def _chol_vjp(l_val: np.ndarray, grad_l: np.ndarray) -> np.ndarray:
    """Adjoint of a = chol(a) @ chol(a)^T with respect to a."""
    middle = _phi_lower_half_diag(np.swapaxes(l_val, -1, -2) @ grad_l)
    # l^{-T} middle l^{-1} via two triangular solves
    lt = np.swapaxes(l_val, -1, -2)
    x = np.linalg.solve(lt, middle)
    grad_a = np.swapaxes(np.linalg.solve(lt, np.swapaxes(x, -1, -2)), -1, -2)
    return 0.5 * (grad_a + np.swapaxes(grad_a, -1, -2))


def robust_cholesky(a) -> CholeskyFactor:
    """Factor a symmetric positive (semi)definite matrix as l l^T.

    Symmetry is required up to 1e-10 relative; jitter escalates from
    1e-6 x mean(diag a) by factors of 10 up to 1e-2 x mean(diag a).
    Raises NotSymmetric or NotPositiveDefinite.
    """
    av = T.value_of(a)
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {av.shape}")
    scale = np.max(np.abs(av))
    asym = np.max(np.abs(av - av.T))
    if scale > 0 and asym > SYMMETRY_RTOL * scale:
        raise NotSymmetric(f"asymmetry {asym:.3e} exceeds {SYMMETRY_RTOL:.0e} x {scale:.3e}")

    diag_mean = float(np.mean(np.diag(av)))
    base = abs(diag_mean) if diag_mean != 0.0 else 1.0
    jitters = [0.0]
    j = JITTER_START
    while j <= JITTER_MAX * (1.0 + 1e-12):
        jitters.append(j * base)
        j *= 10.0
    eye = np.eye(av.shape[0])
    for jitter in jitters:
        try:
            l_val = np.linalg.cholesky(av + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        l = T.custom_node(
            l_val, [(a, lambda g, lv=l_val: _chol_vjp(lv, g))], op="cholesky"
        )
        return CholeskyFactor(l, jitter)
    raise NotPositiveDefinite(
        f"cholesky failed at all jitter levels up to {JITTER_MAX:.0e} x mean diag"
    )


def triangular_solve(factor: CholeskyFactor, b, transpose_flag: bool = False):
    """Solve l x = b, or l^T x = b when transpose_flag is set."""
    l = factor.l if isinstance(factor, CholeskyFactor) else factor
    lv = T.value_of(l)
    bv = T.value_of(b)
    if bv.ndim == 1:
        raise DimensionMismatch("b must be a matrix; reshape vectors to (n, 1)")
    if lv.shape[-1] != bv.shape[-2]:
        raise DimensionMismatch(f"solve shapes {lv.shape} and {bv.shape} do not align")

    x_val = solve_triangular(lv, bv, lower=True, trans=1 if transpose_flag else 0)

    def vjp_b(g):
        return solve_triangular(lv, g, lower=True, trans=0 if transpose_flag else 1)

    def vjp_l(g):
        gb = vjp_b(g)
        if transpose_flag:
            return -np.tril(x_val @ np.swapaxes(gb, -1, -2))
        return -np.tril(gb @ np.swapaxes(x_val, -1, -2))

    return T.custom_node(x_val, [(l, vjp_l), (b, vjp_b)], op="triangular_solve")


def log_determinant(factor: CholeskyFactor):
    """Log-determinant of the factored matrix: 2 sum(log diag l)."""
    l = factor.l if isinstance(factor, CholeskyFactor) else factor
    d = T.diag_part(l)
    return T.reduce_sum(T.log(d)) * 2.0 if T.is_node(d) else 2.0 * float(np.sum(np.log(d)))
