"""Benchmark the sliding-window correlation backends.

Compares the compiled extension against the pure-numpy fallback on the
correlation primitive itself, and the correlation-trick patch distances
against naive differencing end to end. Run from the repository root:

    python3 benchmarks/bench_correlate.py
    python3 benchmarks/bench_correlate.py --images 200 --filters 100
"""

import argparse
import time

import numpy as np

from patchgp._accel import BACKEND, _fallback
from patchgp.images import (
    ImageBatch,
    patch_sq_distances_conv,
    patch_sq_distances_naive,
)

try:
    from patchgp._accel import _corr
except ImportError:
    _corr = None


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--images", type=int, default=100, help="batch size n")
    parser.add_argument("--height", type=int, default=28)
    parser.add_argument("--width", type=int, default=28)
    parser.add_argument("--patch", type=int, default=3, help="square patch side")
    parser.add_argument("--filters", type=int, default=50, help="inducing patch count M")
    parser.add_argument("--repeats", type=int, default=5, help="best-of repetitions")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    images = rng.normal(size=(args.images, args.height, args.width))
    w = h = args.patch
    filters = rng.normal(size=(args.filters, h, w))
    batch = ImageBatch(images[:, :, :, None])
    z = filters.reshape(args.filters, -1)

    print(
        f"{args.images} images {args.height}x{args.width}, "
        f"{args.filters} filters {h}x{w}, best of {args.repeats} "
        f"(selected backend: {BACKEND})"
    )

    t_fallback = best_of(lambda: _fallback.correlate_valid(images, filters), args.repeats)
    print(f"  correlate_valid  fallback  {t_fallback * 1e3:9.2f} ms")
    if _corr is not None:
        t_compiled = best_of(lambda: _corr.correlate_valid(images, filters), args.repeats)
        diff = np.max(
            np.abs(
                _corr.correlate_valid(images, filters)
                - _fallback.correlate_valid(images, filters)
            )
        )
        print(
            f"  correlate_valid  compiled  {t_compiled * 1e3:9.2f} ms"
            f"   ({t_fallback / t_compiled:.2f}x vs fallback, max |diff| {diff:.2e})"
        )
    else:
        print("  correlate_valid  compiled  unavailable (extension not built)")

    t_conv = best_of(lambda: patch_sq_distances_conv(batch, z, w, h), args.repeats)
    t_naive = best_of(lambda: patch_sq_distances_naive(batch, z, w, h), args.repeats)
    err = np.max(
        np.abs(patch_sq_distances_conv(batch, z, w, h) - patch_sq_distances_naive(batch, z, w, h))
    )
    print(f"  patch distances  conv      {t_conv * 1e3:9.2f} ms")
    print(
        f"  patch distances  naive     {t_naive * 1e3:9.2f} ms"
        f"   ({t_naive / t_conv:.2f}x vs conv trick, max |diff| {err:.2e})"
    )


if __name__ == "__main__":
    main()
