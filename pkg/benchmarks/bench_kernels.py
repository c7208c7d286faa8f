"""Micro-benchmark for the heightfield kernel core.

Times the compiled extension against the pure-numpy fallback on identical
inputs and prints a per-kernel table with the speedup. The two backends are
imported side by side, so a single invocation covers both; if the extension
was not built only the fallback column is reported.

Usage: python benchmarks/bench_kernels.py [--grid 64] [--repeats 200]
"""
import argparse
import time

import numpy as np

from grindplan import _core_py

try:
    from grindplan import _core
except ImportError:
    _core = None


def _surface(rng, g):
    s = np.full((g, g), 0.9)
    c = (np.arange(g) + 0.5) / g - 0.5
    for _ in range(3):
        roll, pitch, z = rng.uniform(-0.4, 0.4, 2).tolist() + [rng.uniform(0.4, 0.9)]
        p = z + np.tan(pitch) * c[None, :] + np.tan(roll) * c[:, None]
        s = np.maximum(0.0, np.minimum(s, p))
    return s


def _best_of(fn, repeats):
    fn()  # warm up allocation paths
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases(g, rng):
    s = _surface(rng, g)
    cell = 1.0 / (g * g)
    out = np.empty_like(s)
    s_next = np.empty_like(s)
    w = np.empty_like(s)
    actions = np.column_stack([
        rng.uniform(-0.4, 0.4, 16),
        rng.uniform(-0.4, 0.4, 16),
        rng.uniform(0.3, 0.9, 16),
    ])
    shapes_out = np.empty((17, g, g))
    vol_out = np.empty(16)
    return {
        "plane_grid": lambda m: m.plane_grid(0.2, -0.1, 0.6, out),
        "cut_grid": lambda m: m.cut_grid(s, 0.2, -0.1, 0.6, s_next, w),
        "removal_volume": lambda m: m.removal_volume(s, 0.2, -0.1, 0.6, cell),
        "removal_volume_grad": lambda m: m.removal_volume_grad(s, 0.2, -0.1, 0.6, cell),
        "grid_sum": lambda m: m.grid_sum(s),
        "rollout_16": lambda m: m.rollout(s, actions, cell, shapes_out, vol_out),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=200)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = build_cases(args.grid, rng)

    print(f"grid {args.grid}x{args.grid}, best of {args.repeats} runs")
    header = f"{'kernel':<22}{'numpy':>12}{'compiled':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, call in cases.items():
        t_py = _best_of(lambda: call(_core_py), args.repeats)
        if _core is not None:
            t_c = _best_of(lambda: call(_core), args.repeats)
            ratio = t_py / t_c if t_c > 0 else float("inf")
            print(f"{name:<22}{t_py * 1e6:>10.1f}us{t_c * 1e6:>10.1f}us{ratio:>9.1f}x")
        else:
            print(f"{name:<22}{t_py * 1e6:>10.1f}us{'n/a':>12}{'':>10}")
    if _core is None:
        print("\ncompiled extension not built; showing fallback only")


if __name__ == "__main__":
    main()
