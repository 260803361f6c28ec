"""Kernels invariant under a set of input transformations, via orbit sums.

A GP f is made invariant under maps g_i by summing a base GP over the
closure of an input under the maps (its orbit): f(x) = sum over the orbit
of f_base. Covariances follow directly: k(x, z) sums the base kernel over
the orbit of x, and k(x, x') sums over both orbits. Inducing variables live
in the base function, so K_uu stays the plain base Gram.

Generators are restricted to pixel permutations and shifts with zero fill.
Shift-with-zero-fill is not invertible, so the generated set is a plain
closure of maps rather than a true group; orbits can grow well beyond the
idealized count (clipped remnants are new points), which is why enumeration
is capped.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, OrbitCapExceeded
from .kernels import RbfParams, kernel_matrix

DEFAULT_MAX_ORBIT = 1024


class TransformationGroup:
    """A set of input-to-input maps on flattened images, plus an orbit cap."""

    def __init__(self, generators: Sequence[Callable], max_orbit: int = DEFAULT_MAX_ORBIT):
        self.generators = list(generators)
        self.max_orbit = int(max_orbit)


class Orbit:
    """Deduplicated closure of one input under a group's generators.

    points has shape (size, D) with the original input in row 0.
    """

    def __init__(self, points: np.ndarray):
        self.points = points

    @property
    def size(self) -> int:
        return self.points.shape[0]


def horizontal_flip_map(height: int, width: int) -> Callable:
    def apply(v: np.ndarray) -> np.ndarray:
        return v.reshape(height, width)[:, ::-1].reshape(-1)

    return apply


def vertical_flip_map(height: int, width: int) -> Callable:
    def apply(v: np.ndarray) -> np.ndarray:
        return v.reshape(height, width)[::-1, :].reshape(-1)

    return apply


def shift_map(height: int, width: int, dy: int, dx: int) -> Callable:
    """Shift by (dy, dx) pixels, filling vacated pixels with zero."""

    def apply(v: np.ndarray) -> np.ndarray:
        img = v.reshape(height, width)
        out = np.zeros_like(img)
        ys = slice(max(dy, 0), height + min(dy, 0))
        xs = slice(max(dx, 0), width + min(dx, 0))
        ys_src = slice(max(-dy, 0), height + min(-dy, 0))
        xs_src = slice(max(-dx, 0), width + min(-dx, 0))
        out[ys, xs] = img[ys_src, xs_src]
        return out.reshape(-1)

    return apply


def flip_group(
    height: int,
    width: int,
    horizontal: bool = True,
    vertical: bool = False,
    max_orbit: int = DEFAULT_MAX_ORBIT,
) -> TransformationGroup:
    gens = []
    if horizontal:
        gens.append(horizontal_flip_map(height, width))
    if vertical:
        gens.append(vertical_flip_map(height, width))
    return TransformationGroup(gens, max_orbit=max_orbit)


def translation_group(
    height: int, width: int, max_orbit: int = DEFAULT_MAX_ORBIT
) -> TransformationGroup:
    """Single-pixel shifts in all four directions with zero fill."""
    gens = [
        shift_map(height, width, dy, dx)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1))
    ]
    return TransformationGroup(gens, max_orbit=max_orbit)


def orbit(group: TransformationGroup, x) -> Orbit:
    """Breadth-first closure of x under the generators, deduplicated by
    exact equality, raising OrbitCapExceeded rather than truncating."""
    x0 = np.asarray(x, dtype=np.float64).reshape(-1)
    points = [x0]
    # +0.0 normalizes -0.0 so byte-level dedup matches exact equality.
    seen = {(x0 + 0.0).tobytes()}
    frontier = [x0]
    while frontier:
        nxt = []
        for p in frontier:
            for gen in group.generators:
                q = np.asarray(gen(p), dtype=np.float64).reshape(-1)
                if q.shape != x0.shape:
                    raise DimensionMismatch(
                        f"generator changed size {x0.shape[0]} -> {q.shape[0]}"
                    )
                key = (q + 0.0).tobytes()
                if key in seen:
                    continue
                if len(points) + 1 > group.max_orbit:
                    raise OrbitCapExceeded(
                        f"orbit exceeds max_orbit={group.max_orbit}"
                    )
                seen.add(key)
                points.append(q)
                nxt.append(q)
        frontier = nxt
    return Orbit(np.stack(points, axis=0))


def invariant_kfu(x, z_base, group: TransformationGroup, params: RbfParams) -> float:
    """k(x, z) = sum of the base kernel over the orbit of x against z."""
    orb = orbit(group, x)
    z = np.asarray(z_base, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != orb.points.shape[1]:
        raise DimensionMismatch(f"z size {z.shape[1]} != input size {orb.points.shape[1]}")
    return float(np.sum(kernel_matrix(orb.points, z, params)))


def invariant_kfu_batch(
    xs: np.ndarray, z_base: np.ndarray, group: TransformationGroup, params: RbfParams
) -> np.ndarray:
    """Rows of k_fu for several inputs against several base-space points."""
    xs = np.asarray(xs, dtype=np.float64)
    z = np.asarray(z_base, dtype=np.float64)
    out = np.empty((xs.shape[0], z.shape[0]), dtype=np.float64)
    for i in range(xs.shape[0]):
        orb = orbit(group, xs[i])
        out[i] = np.sum(kernel_matrix(orb.points, z, params), axis=0)
    return out


def invariant_kff(x, x_other, group: TransformationGroup, params: RbfParams) -> float:
    """k(x, x') = double sum of the base kernel over both orbits."""
    orb_a = orbit(group, x)
    orb_b = orbit(group, x_other)
    return float(np.sum(kernel_matrix(orb_a.points, orb_b.points, params)))
