#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run with no arguments; prints one table per kernel family. The conv table
is what justifies the auto-dispatch rule in gaitkit.kernels.dispatch
(direct njit loops win while cin*k*k is small, im2col+BLAS wins at
paper-scale widths).

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import os
import time

import numpy as np


def timed(fn, *args, repeats=3):
    fn(*args)  # warm-up / JIT compile
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def run_backend(backend, fn, *args, repeats=3):
    os.environ["GAITKIT_BACKEND"] = backend
    return timed(fn, *args, repeats=repeats)


def bench_conv(repeats):
    from gaitkit.kernels import (conv2d_backward_input,
                                 conv2d_backward_weight, conv2d_forward)
    print("\nconv2d (3x3, stride 1, pad 1) - seconds, lower is better")
    print(f"{'shape':<34}{'op':<12}{'numba':>10}{'numpy':>10}{'winner':>9}")
    cases = [
        (64, 8, 8, 64),     # desk-scale stage 1
        (64, 16, 16, 64),
        (16, 128, 128, 64), # paper-scale stage 1
        (16, 256, 256, 32),
    ]
    for n, cin, cout, hw in cases:
        x = np.random.rand(n, cin, hw, hw).astype(np.float32)
        w = np.random.rand(cout, cin, 3, 3).astype(np.float32)
        dy = np.random.rand(n, cout, hw, hw).astype(np.float32)
        shape = f"n{n} {cin}->{cout} @{hw}x{hw}"
        for op, fn, args in (
                ("forward", conv2d_forward, (x, w)),
                ("bwd_input", conv2d_backward_input, (dy, w, x.shape)),
                ("bwd_weight", conv2d_backward_weight, (dy, x, w.shape))):
            tb = run_backend("numba", fn, *args, repeats=repeats)
            tn = run_backend("numpy", fn, *args, repeats=repeats)
            win = "numba" if tb < tn else "numpy"
            print(f"{shape:<34}{op:<12}{tb:>10.4f}{tn:>10.4f}{win:>9}")


def bench_bn(repeats):
    from gaitkit.kernels import bnops
    print("\nbatchnorm passes - seconds")
    print(f"{'shape':<34}{'op':<12}{'numba':>10}{'numpy':>10}{'winner':>9}")
    x = np.random.rand(256, 16, 64, 64).astype(np.float32)
    gy = np.random.rand(*x.shape).astype(np.float32)
    a = np.random.rand(16)
    b = np.random.rand(16)
    y = np.maximum(a.astype(np.float32).reshape(1, -1, 1, 1) * x, 0)
    for op, fn, args in (
            ("stats", bnops.bn_stats, (x,)),
            ("affine+relu", bnops.bn_affine, (x, a, b, True)),
            ("grad_stats", bnops.bn_grad_stats, (gy, x, y)),
            ("bwd_fused", bnops.bn_backward_fused, (gy, x, a, a, b, y)),
            ("add_relu", bnops.add_relu, (x, gy))):
        tb = run_backend("numba", fn, *args, repeats=repeats)
        tn = run_backend("numpy", fn, *args, repeats=repeats)
        win = "numba" if tb < tn else "numpy"
        print(f"{'256x16x64x64':<34}{op:<12}{tb:>10.4f}{tn:>10.4f}{win:>9}")


def bench_geometry(repeats):
    from gaitkit.kernels import cluster_labels, raycast, scatter_min_depth
    print("\ngeometry kernels - seconds")
    print(f"{'case':<34}{'op':<12}{'numba':>10}{'numpy':>10}{'winner':>9}")
    caps = np.random.rand(12, 7)
    caps[:, 6] = 0.1
    corner = np.array([-1.0, -1.0, 2.0])
    args = (corner, np.array([0.018, 0.0, 0.0]),
            np.array([0.0, 0.0, -0.018]), (124, 96),
            np.array([0.0, 1.0, 0.0]), caps, None)
    tb = run_backend("numba", raycast, *args, repeats=repeats)
    tn = run_backend("numpy", raycast, *args, repeats=repeats)
    print(f"{'12 capsules 124x96':<34}{'raycast':<12}{tb:>10.4f}{tn:>10.4f}"
          f"{'numba' if tb < tn else 'numpy':>9}")

    pts = np.random.rand(4000, 3) * np.array([0.5, 0.5, 1.8])
    px = np.random.randint(0, 96, 4000)
    py = np.random.randint(0, 124, 4000)
    d = np.random.rand(4000)
    tb = run_backend("numba", scatter_min_depth, px, py, d, 124, 96,
                     repeats=repeats)
    tn = run_backend("numpy", scatter_min_depth, px, py, d, 124, 96,
                     repeats=repeats)
    print(f"{'4000 pts z-buffer':<34}{'scatter':<12}{tb:>10.4f}{tn:>10.4f}"
          f"{'numba' if tb < tn else 'numpy':>9}")

    tb = run_backend("numba", cluster_labels, pts, 0.2, 5, repeats=repeats)
    tn = run_backend("numpy", cluster_labels, pts, 0.2, 5, repeats=repeats)
    print(f"{'4000 pts clustering':<34}{'cluster':<12}{tb:>10.4f}{tn:>10.4f}"
          f"{'numba' if tb < tn else 'numpy':>9}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    bench_conv(args.repeats)
    bench_bn(args.repeats)
    bench_geometry(args.repeats)


if __name__ == "__main__":
    main()
