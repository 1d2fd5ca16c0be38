"""Compare the compiled and NumPy kernel backends on representative sizes.

Usage: python benchmarks/bench_kernels.py [--repeat R]
"""

import argparse
import math
import time

import numpy as np

from enkf_lab import _kernels_py

try:
    from enkf_lab import _kernels
except ImportError:  # extension not built
    _kernels = None


def _best(fn, repeat):
    best = math.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases():
    rng = np.random.default_rng(0)
    for n in (1024, 4096):
        x = np.linspace(-12, 12, n)[:, None]
        yield (f"mixture 1d n={n}", "gaussian_mixture_density",
               (x, 0.8 * x + 0.1 * np.sin(x), rng.random(n), np.array([[1 / math.sqrt(0.5)]]), 1.0))
    g = np.stack(np.meshgrid(np.linspace(-10, 10, 64), np.linspace(-10, 10, 64), indexing="ij"), -1).reshape(-1, 2)
    yield ("mixture 2d 64x64", "gaussian_mixture_density", (g, 0.7 * g, rng.random(len(g)), np.eye(2), 1.0))
    for m in (10 ** 5, 3 * 10 ** 6):
        pts = rng.normal(0, 2, (m, 1))
        yield (f"cic 1d points={m}", "cic_deposit", (pts, rng.random(m), np.array([-12.0]), np.array([24 / 2048]), (2048,)))
    pts = rng.normal(0, 2, (10 ** 6, 2))
    yield ("cic 2d points=1e6", "cic_deposit",
           (pts, rng.random(10 ** 6), np.array([-12.0, -12.0]), np.array([24 / 256] * 2), (256, 256)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    print(f"{'case':28s} {'python [s]':>11s} {'compiled [s]':>13s} {'speedup':>8s} {'max rel diff':>13s}")
    for name, fn, a in cases():
        tp, rp = _best(lambda: getattr(_kernels_py, fn)(*a), args.repeat)
        if _kernels is None:
            print(f"{name:28s} {tp:11.4f} {'n/a':>13s}")
            continue
        tc, rc = _best(lambda: getattr(_kernels, fn)(*a), args.repeat)
        vp = rp[0] if isinstance(rp, tuple) else rp
        vc = rc[0] if isinstance(rc, tuple) else rc
        diff = float(np.max(np.abs(vp - vc)) / max(np.max(np.abs(vp)), 1e-300))
        print(f"{name:28s} {tp:11.4f} {tc:13.4f} {tp / tc:8.1f} {diff:13.2e}")


if __name__ == "__main__":
    main()
