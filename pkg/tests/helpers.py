"""Shared test utilities: finite-difference oracles and random SPD matrices."""

import numpy as np

import patchgp.tape as T


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.ravel()[i] += h
        xm = x.copy()
        xm.ravel()[i] -= h
        g.ravel()[i] = (float(f(xp)) - float(f(xm))) / (2.0 * h)
    return g


def tape_grad(f, x):
    """(value, gradient) of scalar-node-valued f at array leaf x."""
    tape = T.Tape()
    leaf = tape.leaf(np.asarray(x, dtype=np.float64))
    out = f(leaf)
    grads = T.backward(tape, out)
    g = grads.get(leaf)
    if g is None:
        g = np.zeros_like(np.asarray(x, dtype=np.float64))
    return float(T.value_of(out)), np.asarray(g)


def check_gradient(f, x, h=1e-6, rtol=1e-6, atol=1e-8):
    """Assert tape gradient of f matches central differences at x."""
    _, analytic = tape_grad(f, x)
    numeric = numeric_grad(lambda a: T.value_of(f(T.Tape().leaf(a))), x, h=h)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def random_spd(n, seed, scale=1.0):
    """Well-conditioned random symmetric positive definite matrix."""
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(n, n))
    return scale * (b @ b.T + n * np.eye(n))


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(b)), 1e-300)
    return np.max(np.abs(a - b)) / denom
