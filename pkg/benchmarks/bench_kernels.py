"""Compare the jitted kernels against their pure-numpy fallbacks.

Runs every kernel pair on a range of shapes, reports per-call time for
both paths, the speedup, and the largest elementwise disagreement. With
TOKENCAST_PURE_NUMPY=1 (or without numba installed) both columns time the
same functions; the script says so rather than pretending to compare.

Usage: python3 benchmarks/bench_kernels.py [--repeats 200] [--rows 4096]
"""

import argparse
import time

import numpy as np

from tokencast.kernels import ACTIVE_IMPLS, BACKEND, NUMPY_IMPLS


def bench(fn, args, repeats, setup=None):
    """Best-of-5 mean per-call seconds over `repeats` calls."""
    best = float("inf")
    for _ in range(5):
        fresh = setup() if setup else args
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn(*fresh)
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.abs(np.asarray(a) - np.asarray(b)).max())


def make_cases(rows, cols):
    g = np.random.Generator(np.random.PCG64(0))
    x = g.normal(size=(rows, cols))
    y = NUMPY_IMPLS["softmax_rows"](x)
    gout = g.normal(size=(rows, cols))
    w = g.normal(size=cols) + 1.0
    _, inv = NUMPY_IMPLS["rmsnorm_rows"](x, w, 1e-6)
    # silu and the optimizer update work on flat buffers by contract
    flat = g.normal(size=rows * cols)
    grad = g.normal(size=rows * cols)

    def adamw_args():
        # in-place update: every timed call gets fresh state buffers
        return (flat.copy(), grad, np.zeros_like(flat), np.zeros_like(flat),
                1, 1e-3, 0.9, 0.999, 1e-8, 0.01)

    matrix = f"{rows}x{cols}"
    vector = str(rows * cols)
    return {
        "softmax_rows": ((x,), None, matrix),
        "softmax_rows_grad": ((y, gout), None, matrix),
        "rmsnorm_rows": ((x, w, 1e-6), None, matrix),
        "rmsnorm_rows_grad": ((x, w, inv, gout), None, matrix),
        "silu": ((flat,), None, vector),
        "silu_grad": ((flat, grad), None, vector),
        "adamw_update": (adamw_args(), adamw_args, vector),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=64)
    opts = ap.parse_args()

    print(f"active backend: {BACKEND}")
    if BACKEND == "numpy":
        print("note: jitted path unavailable or disabled, both columns are numpy\n")

    cases = make_cases(opts.rows, opts.cols)
    header = f"{'kernel':<20} {'shape':>12} {'numpy ms':>10} {BACKEND + ' ms':>10} " \
             f"{'speedup':>8} {'max diff':>10}"
    print(header)
    print("-" * len(header))
    for name, (args, setup, shape) in cases.items():
        np_fn, fast_fn = NUMPY_IMPLS[name], ACTIVE_IMPLS[name]
        fast_fn(*(setup() if setup else args))  # trigger JIT compile
        if name == "adamw_update":
            a1, a2 = setup(), setup()
            np_fn(*a1)
            fast_fn(*a2)
            diff = max_diff(a1[0], a2[0])
        else:
            diff = max_diff(np_fn(*args), fast_fn(*args))
        t_np = bench(np_fn, args, opts.repeats, setup)
        t_fast = bench(fast_fn, args, opts.repeats, setup)
        print(f"{name:<20} {shape:>12} {t_np * 1e3:>10.3f} {t_fast * 1e3:>10.3f} "
              f"{t_np / t_fast:>7.2f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
