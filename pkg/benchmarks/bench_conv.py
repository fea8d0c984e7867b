"""Time the numba and numpy 3-D convolution kernels on the shapes the desk model uses.

    python3 benchmarks/bench_conv.py [--repeat N]

Prints one row per (shape, pass) with the best-of-N wall time of each path
and the speedup. Both paths are checked to agree before timing.
"""
import argparse
import time

import numpy as np

from dygait import kernels

# (name, x shape (N, C, T, H, W), out channels, kernel, temporal stride, padding)
CASES = [
    ("lta 3x3x3", (16, 1, 30, 64, 44), 8, (3, 3, 3), 1, (1, 1, 1)),
    ("lta 3x1x1 /3", (16, 8, 30, 64, 44), 8, (3, 1, 1), 3, (0, 0, 0)),
    ("block1 3x3x3", (16, 8, 10, 64, 44), 8, (3, 3, 3), 1, (1, 1, 1)),
    ("block1 1x3x3", (16, 8, 10, 64, 44), 8, (1, 3, 3), 1, (0, 1, 1)),
    ("block3 3x3x3", (16, 16, 10, 32, 22), 32, (3, 3, 3), 1, (1, 1, 1)),
]


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':<14} {'pass':<12} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}")
    for name, shape, out_c, kernel, stride, pad in CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        w = rng.standard_normal((out_c, shape[1], *kernel)).astype(np.float32)
        y = kernels.conv3d_forward(x, w, stride, pad, use_numba=False)
        g = rng.standard_normal(y.shape).astype(np.float32)
        passes = {
            "forward": lambda nb: kernels.conv3d_forward(x, w, stride, pad, use_numba=nb),
            "grad input": lambda nb: kernels.conv3d_grad_input(g, w, x.shape, stride, pad, use_numba=nb),
            "grad weight": lambda nb: kernels.conv3d_grad_weight(g, x, kernel, stride, pad, use_numba=nb),
        }
        for pname, fn in passes.items():
            ref, fast = fn(False), fn(True)  # the numba call also triggers compilation
            # float32 sums over ~1e5 terms: compare against the output's scale, not per element
            assert np.abs(fast - ref).max() <= 1e-5 * np.abs(ref).max(), f"{name} {pname}: paths disagree"
            t_np = best_of(lambda: fn(False), args.repeat)
            t_nb = best_of(lambda: fn(True), args.repeat)
            print(f"{name:<14} {pname:<12} {1e3 * t_np:>9.1f} {1e3 * t_nb:>9.1f} {t_np / t_nb:>7.1f}x", flush=True)


if __name__ == "__main__":
    main()
