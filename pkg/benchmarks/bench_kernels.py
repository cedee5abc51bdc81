"""Compare the compiled scan kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--lengths 256,1024,4096] [--repeat 5]

Prints one row per (kernel, L) with the best-of-``repeat`` wall time for each
backend, the speedup, and the largest absolute difference between outputs.
"""

import argparse
import timeit

import numpy as np

from maskdiff import _scan_py

try:
    from maskdiff import _scan
except ImportError:
    _scan = None


def make_inputs(rng, B, L, D, N, dtype):
    decay = rng.uniform(0.5, 1.0, (B, L, D)).astype(dtype)
    drive = rng.standard_normal((B, L, D)).astype(dtype)
    Bm = rng.standard_normal((B, L, N)).astype(dtype)
    C = rng.standard_normal((B, L, N)).astype(dtype)
    h0 = np.zeros((B, D), dtype)
    return decay, drive, Bm, C, h0


def cases(mod, x):
    decay, drive, Bm, C, h0 = x
    h = mod.linear_scan_fwd(decay, drive, h0)
    _, hs = mod.selective_scan_fwd(decay, drive, Bm, C, True)
    gy = np.ones_like(drive)
    return {
        "linear_fwd": lambda: mod.linear_scan_fwd(decay, drive, h0),
        "linear_bwd": lambda: mod.linear_scan_bwd(decay, h, h0, gy),
        "selective_fwd": lambda: mod.selective_scan_fwd(decay, drive, Bm, C, True),
        "selective_bwd": lambda: mod.selective_scan_bwd(decay, drive, Bm, C, hs, gy),
    }


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b) if x is not None)
    return float(np.abs(np.asarray(a) - np.asarray(b)).max())


def best_time(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", default="256,1024,4096")
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--d", type=int, default=128, help="channels")
    ap.add_argument("--n", type=int, default=16, help="state size")
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _scan is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14} {'L':>6} {'python_ms':>10} {'compiled_ms':>12} {'speedup':>8} {'max_abs_diff':>13}")
    for L in (int(v) for v in args.lengths.split(",")):
        x = make_inputs(rng, args.batch, L, args.d, args.n, np.dtype(args.dtype))
        py, cy = cases(_scan_py, x), cases(_scan, x)
        for name in py:
            tp, tc = best_time(py[name], args.repeat), best_time(cy[name], args.repeat)
            diff = max_diff(py[name](), cy[name]())
            print(f"{name:<14} {L:>6} {tp * 1e3:>10.2f} {tc * 1e3:>12.2f} {tp / tc:>7.1f}x {diff:>13.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
