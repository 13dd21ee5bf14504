#!/usr/bin/env python3
"""Benchmark the numba and numpy lanes of every hot kernel.

Usage:
    python benchmarks/bench_kernels.py [--points N] [--size N] [--repeats N]

Both lanes compute identical results (asserted here on every input); the
table reports per-call time and the numba speedup. Without numba installed
only the numpy lane runs.
"""

import argparse
import time

import numpy as np

from geovos import kernels
from geovos._accel import HAVE_NUMBA


def timeit(fn, args, repeats):
    fn(*args)  # warmup / JIT
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def make_cases(n_points, size, seed=0):
    rng = np.random.default_rng(seed)
    mask = rng.random((size, size)) < 0.5
    depth = rng.uniform(0.5, 5.0, size=(size, size))
    depth[rng.random(depth.shape) < 0.1] = 0.0
    pts = rng.normal(size=(n_points, 3)) + [0.0, 0.0, 3.0]
    rot = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    if np.linalg.det(rot) < 0:
        rot[:, 0] = -rot[:, 0]
    trans = rng.normal(size=3)
    dirs = rng.normal(size=(size, size, 3))
    dirs[..., 2] = np.abs(dirs[..., 2]) + 0.5
    lo = rng.uniform(-2, 0, size=(8, 3))
    boxes = np.concatenate([lo, lo + rng.uniform(0.3, 1.5, size=(8, 3))], axis=1)
    intr = (float(size), float(size), size / 2.0, size / 2.0)
    fx, fy, cx, cy = intr
    return [
        ("backproject_mask",
         kernels._backproject_mask_numba, kernels._backproject_mask_numpy,
         (mask, depth, fx, fy, cx, cy)),
        ("count_in_frustum",
         kernels._count_in_frustum_numba, kernels._count_in_frustum_numpy,
         (pts, rot, trans, fx, fy, cx, cy, float(size), float(size), 1e-4)),
        ("depth_agreement",
         kernels._depth_agreement_numba, kernels._depth_agreement_numpy,
         (pts, depth, fx, fy, cx, cy, 0.05)),
        ("erode_once",
         kernels._erode_once_numba, kernels._erode_once_numpy,
         (mask,)),
        ("render_boxes",
         kernels._render_boxes_numba, kernels._render_boxes_numpy,
         (np.array([0.0, 0.0, -4.0]), dirs, boxes, 1e-9)),
    ]


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    parser = argparse.ArgumentParser(description="kernel lane benchmark")
    parser.add_argument("--points", type=int, default=200_000)
    parser.add_argument("--size", type=int, default=512)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"numba available: {HAVE_NUMBA}")
    print(f"{'kernel':<20} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}  equal")
    print("-" * 66)
    for name, fn_numba, fn_numpy, fn_args in make_cases(args.points, args.size):
        t_np, out_np = timeit(fn_numpy, fn_args, args.repeats)
        if HAVE_NUMBA:
            t_nb, out_nb = timeit(fn_numba, fn_args, args.repeats)
            equal = same(out_np, out_nb)
            print(f"{name:<20} {t_np * 1e3:>12.3f} {t_nb * 1e3:>12.3f} "
                  f"{t_np / t_nb:>8.2f}x  {equal}")
            if not equal:
                raise SystemExit(f"lane mismatch in {name}")
        else:
            print(f"{name:<20} {t_np * 1e3:>12.3f} {'-':>12} {'-':>9}  -")


if __name__ == "__main__":
    main()
