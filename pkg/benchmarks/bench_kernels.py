"""Time every kernel on its numba path and its pure-numpy path.

    python benchmarks/bench_kernels.py [--repeat 20]

The numba variants are compiled once before timing. Results are best-of-N
wall-clock milliseconds per call; the ``ratio`` column is numpy / numba.
"""

import argparse
import time

import numpy as np

from numgame import kernels


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def cases(rng):
    side = 64
    centers = rng.uniform(8, 56, size=(5, 2))
    radii = rng.uniform(3, 5, size=5)
    mask = kernels._paint_disks_numpy(side, centers, radii) < 0.5
    segs = rng.uniform(0, side, size=(32, 5, 4))
    d2, arg, tpar = kernels._segment_field_numpy(segs, side)
    grad = rng.normal(size=d2.shape)
    feats = rng.uniform(size=(500, 256))
    cents = rng.uniform(size=(5, 256))
    a, b = rng.uniform(size=(100, 256)), rng.uniform(size=(100, 256))
    return {
        "paint_disks 64px x5": (kernels._paint_disks_jit, kernels._paint_disks_numpy, (side, centers, radii)),
        "label_components 64px": (kernels._label_components_jit, kernels._label_components_numpy, (mask,)),
        "segment_field 32x5 strokes": (kernels._segment_field_jit, kernels._segment_field_numpy, (segs, side)),
        "segment_field_grad": (kernels._segment_field_grad_jit, kernels._segment_field_grad_numpy,
                               (segs, arg, tpar, grad)),
        "nearest_centroid 500x256": (kernels._nearest_centroid_jit, kernels._nearest_centroid_numpy, (feats, cents)),
        "mean_pair_distance 100x100": (kernels._mean_pair_distance_jit, kernels._mean_pair_distance_numpy, (a, b)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':30s} {'numba ms':>10s} {'numpy ms':>10s} {'ratio':>7s}")
    for name, (jit_fn, np_fn, inputs) in cases(rng).items():
        jit_fn(*inputs)  # compile
        tj = _best(lambda: jit_fn(*inputs), args.repeat)
        tn = _best(lambda: np_fn(*inputs), args.repeat)
        print(f"{name:30s} {tj:10.3f} {tn:10.3f} {tn / tj:7.1f}")


if __name__ == "__main__":
    main()
