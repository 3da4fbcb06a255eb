#!/usr/bin/env python3
"""Benchmark the numba conv kernels against the pure-numpy fallback.

Runs forward and both backward kernels on a LeNet-sized workload with each
backend and prints per-call times plus the speedup. The numba path is
warmed once so JIT compilation stays out of the timings.
"""

import argparse
import time

import numpy as np

from terntrain import kernels


def time_call(fn, iters):
    best = float("inf")
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(batch, iters):
    rng = np.random.default_rng(0)
    cases = {
        "conv 1->8 k4 s2 28x28": (
            rng.normal(size=(batch, 1, 28, 28)),
            rng.normal(size=(8, 1, 4, 4)),
            2,
            1,
        ),
        "conv 8->16 k4 s2 14x14": (
            rng.normal(size=(batch, 8, 14, 14)),
            rng.normal(size=(16, 8, 4, 4)),
            2,
            1,
        ),
    }

    print(f"batch={batch}, iters={iters}, backends={kernels.available_backends()}")
    header = f"{'case':<28} {'kernel':<10} " + " ".join(f"{b:>12}" for b in kernels.available_backends())
    print(header)
    print("-" * len(header))

    for name, (x, w, stride, padding) in cases.items():
        ho, wo = kernels.conv_out_hw(x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, padding)
        g = np.random.default_rng(1).normal(size=(x.shape[0], w.shape[0], ho, wo))
        calls = {
            "forward": lambda: kernels.conv2d_forward(x, w, stride, padding),
            "backward_x": lambda: kernels.conv2d_backward_x(g, x.shape, w, stride, padding),
            "backward_w": lambda: kernels.conv2d_backward_w(g, x, w.shape, stride, padding),
        }
        for kname, call in calls.items():
            times = {}
            for backend in kernels.available_backends():
                kernels.set_backend(backend)
                call()  # warm-up: JIT compile / einsum path cache
                times[backend] = time_call(call, iters)
            row = f"{name:<28} {kname:<10} " + " ".join(
                f"{times[b] * 1e3:>10.3f}ms" for b in kernels.available_backends()
            )
            if "numba" in times and "numpy" in times:
                row += f"   numpy/numba = {times['numpy'] / times['numba']:.2f}x"
            print(row)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--iters", type=int, default=20)
    args = parser.parse_args()
    bench(args.batch, args.iters)
