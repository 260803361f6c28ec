"""Observation models: variational expectations and predictive metrics.

Three likelihoods: Gaussian (closed-form expectation), Bernoulli through a
probit link (Gauss-Hermite quadrature of log Phi), and Monte-Carlo softmax
for multiclass (per-class Gaussian samples with fixed per-class random
streams, so results are reproducible and permutation behaviour is exact in
the deterministic vars = 0 limit).

All expectation routines accept plain arrays or tape nodes and vectorize
over data points; scalar array inputs return plain floats.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

from . import tape as T
from .errors import DimensionMismatch

DEFAULT_QUAD_NODES = 20
DEFAULT_MC_SAMPLES = 20

VARIANTS = ("gaussian", "bernoulli-probit", "softmax-mc")

_LOG_2PI = math.log(2.0 * math.pi)


class LikelihoodSpec:
    """Which observation model to use, plus its fixed configuration.

    noise_variance holds the current Gaussian noise level for evaluation
    paths; training passes its differentiable noise node explicitly.
    """

    def __init__(
        self,
        variant: str,
        noise_variance=None,
        samples: int = DEFAULT_MC_SAMPLES,
        seed: int = 0,
        quad_nodes: int = DEFAULT_QUAD_NODES,
    ):
        if variant not in VARIANTS:
            raise DimensionMismatch(f"unknown likelihood variant {variant!r}")
        if variant == "gaussian" and noise_variance is not None and float(noise_variance) <= 0:
            raise DimensionMismatch("gaussian noise variance must be positive")
        if samples < 1:
            raise DimensionMismatch("samples must be at least 1")
        self.variant = variant
        self.noise_variance = noise_variance
        self.samples = int(samples)
        self.seed = int(seed)
        self.quad_nodes = int(quad_nodes)


_HERMGAUSS_CACHE: dict = {}


def _hermgauss(nodes: int):
    if nodes not in _HERMGAUSS_CACHE:
        _HERMGAUSS_CACHE[nodes] = np.polynomial.hermite.hermgauss(nodes)
    return _HERMGAUSS_CACHE[nodes]


def _scalar_in(*xs) -> bool:
    return all(np.ndim(T.value_of(x)) == 0 for x in xs) and not any(T.is_node(x) for x in xs)


def gaussian_var_exp(y, mu, var, noise_variance):
    """E_{N(f; mu, var)}[log N(y; f, noise)] in closed form."""
    resid = T.sub(y, mu)
    quad = T.add(T.mul(resid, resid), var)
    log_norm = T.mul(0.5, T.log(T.mul(2.0 * math.pi, noise_variance)))
    out = T.sub(T.mul(-1.0, log_norm), T.div(quad, T.mul(2.0, noise_variance)))
    if _scalar_in(y, mu, var, noise_variance):
        return float(T.value_of(out))
    return out


def bernoulli_var_exp(y, mu, var, quad_nodes: int = DEFAULT_QUAD_NODES):
    """E_{N(f; mu, var)}[log Phi((2y - 1) f)] by Gauss-Hermite quadrature."""
    scalar = _scalar_in(y, mu, var)
    t, w = _hermgauss(quad_nodes)
    sign = (2.0 * np.asarray(T.value_of(y), dtype=np.float64) - 1.0).reshape(-1, 1)
    mu2 = T.reshape(mu, (-1, 1))
    sigma = T.sqrt(T.reshape(var, (-1, 1)))
    f = T.add(mu2, T.mul(sigma, (math.sqrt(2.0) * t).reshape(1, -1)))
    lp = T.log_ndtr(T.mul(sign, f))
    out = T.reduce_sum(T.mul(lp, (w / math.sqrt(math.pi)).reshape(1, -1)), axis=1)
    if scalar:
        return float(T.value_of(out)[0])
    return out


def _softmax_eps(spec: LikelihoodSpec, num_classes: int) -> np.ndarray:
    """Fixed standard-normal draws, one independent stream per class index."""
    eps = np.empty((spec.samples, num_classes), dtype=np.float64)
    for k in range(num_classes):
        gen = np.random.Generator(
            np.random.Philox(key=np.array([spec.seed, k], dtype=np.uint64))
        )
        eps[:, k] = gen.standard_normal(spec.samples)
    return eps


def _mc_mean(x):
    """Mean over the last axis, exact when all entries of a row are equal.

    Computed as x[0] plus the compensated sum of deviations divided by the
    count, so the deterministic vars = 0 case introduces no rounding. The
    gradient is the exact 1/S spread.
    """
    xv = T.value_of(x)
    n, s = xv.shape
    dev = xv - xv[:, :1]
    out = xv[:, 0] + np.array([math.fsum(row) for row in dev]) / s

    def vjp(g):
        return np.broadcast_to(np.asarray(g).reshape(n, 1) / s, (n, s)).copy()

    return T.custom_node(out, [(x, vjp)], op="mc_mean")


def softmax_var_exp_batch(mus, vars_, y, spec: LikelihoodSpec):
    """Monte-Carlo E[log softmax_y(f)] for a batch: mus, vars (n, K) -> (n,)."""
    musv = T.value_of(mus)
    n, k = musv.shape
    y = np.asarray(y, dtype=np.intp)
    eps = _softmax_eps(spec, k)
    sigma = T.sqrt(vars_)
    f = T.add(
        T.reshape(mus, (n, 1, k)),
        T.mul(T.reshape(sigma, (n, 1, k)), eps.reshape(1, spec.samples, k)),
    )
    onehot = np.zeros((n, 1, k), dtype=np.float64)
    onehot[np.arange(n), 0, y] = 1.0
    ysel = T.reduce_sum(T.mul(f, onehot), axis=2)
    lse = T.logsumexp(f, axis=2)
    return _mc_mean(T.sub(ysel, lse))


def softmax_mc_expectation(y: int, mus, vars_, spec: LikelihoodSpec):
    """Monte-Carlo E[log softmax_y(f)] for one point; float for plain inputs."""
    musv = T.value_of(mus)
    k = musv.reshape(-1).shape[0]
    mus2 = T.reshape(mus, (1, k))
    vars2 = T.reshape(vars_, (1, k))
    out = softmax_var_exp_batch(mus2, vars2, np.array([int(y)]), spec)
    if not (T.is_node(mus) or T.is_node(vars_)):
        return float(T.value_of(out)[0])
    return out


def variational_expectations(spec: LikelihoodSpec, marginals, y, noise_variance=None):
    """Per-point E_q[log p(y_i | f_i)] for a list of per-latent marginals."""
    if spec.variant == "gaussian":
        noise = noise_variance if noise_variance is not None else spec.noise_variance
        return gaussian_var_exp(np.asarray(y, dtype=np.float64), marginals[0].mu, marginals[0].var, noise)
    if spec.variant == "bernoulli-probit":
        return bernoulli_var_exp(np.asarray(y, dtype=np.float64), marginals[0].mu, marginals[0].var, spec.quad_nodes)
    n = marginals[0].mu_value.shape[0]
    mus = T.concat([T.reshape(m.mu, (n, 1)) for m in marginals], axis=1)
    vars_ = T.concat([T.reshape(m.var, (n, 1)) for m in marginals], axis=1)
    return softmax_var_exp_batch(mus, vars_, y, spec)


def predictive_metrics(marginals, y_test, spec: LikelihoodSpec):
    """(error rate, mean negative log predictive probability) on test data.

    Bernoulli-probit uses the closed-form predictive p = Phi(mu / sqrt(1 +
    var)), the exact Gaussian integral of the link. Softmax probabilities
    are Monte-Carlo averages with the same fixed per-class streams as
    training.
    """
    y = np.asarray(y_test)
    if spec.variant == "gaussian":
        mu = marginals[0].mu_value
        var = marginals[0].var_value
        s = var + float(spec.noise_variance)
        pred = (mu > 0.5).astype(y.dtype)
        error = float(np.mean(pred != y))
        yf = y.astype(np.float64)
        nlpp = float(np.mean(0.5 * np.log(2.0 * math.pi * s) + (yf - mu) ** 2 / (2.0 * s)))
        return error, nlpp
    if spec.variant == "bernoulli-probit":
        mu = marginals[0].mu_value
        var = marginals[0].var_value
        z = mu / np.sqrt(1.0 + var)
        log_p1 = _sp.log_ndtr(z)
        log_p0 = _sp.log_ndtr(-z)
        pred = (z > 0).astype(y.dtype)
        error = float(np.mean(pred != y))
        nlpp = float(-np.mean(np.where(y == 1, log_p1, log_p0)))
        return error, nlpp
    mus = np.stack([m.mu_value for m in marginals], axis=1)
    vars_ = np.stack([m.var_value for m in marginals], axis=1)
    n, k = mus.shape
    eps = _softmax_eps(spec, k)
    f = mus[:, None, :] + np.sqrt(vars_)[:, None, :] * eps[None, :, :]
    log_sm = f - _sp.logsumexp(f, axis=2, keepdims=True)
    # log of the MC-average probability, kept in log space per class
    log_probs = _sp.logsumexp(log_sm, axis=1) - math.log(spec.samples)
    pred = np.argmax(log_probs, axis=1)
    error = float(np.mean(pred != y))
    nlpp = float(-np.mean(log_probs[np.arange(n), y]))
    return error, nlpp
