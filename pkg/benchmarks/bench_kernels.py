"""Benchmark of the propagation kernels: compiled extension vs numpy fallback.

Usage:  python3 benchmarks/bench_kernels.py

Workloads mirror the hot paths of the experiments: short-window batch
propagation (what the finite-difference Jacobian does once per solver
iteration) and a long single trajectory.
"""

import time

import numpy as np

from stochlm import _lorenz_py

try:
    from stochlm import _lorenz_cy
except ImportError:
    _lorenz_cy = None

PARAMS = (10.0, 28.0, 8.0 / 3.0, 0.01)


def time_call(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench(impl):
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal(3)
    batch = rng.standard_normal((7, 3))

    def jacobian_style_batches():
        for _ in range(2000):
            impl.lorenz_trajectory_batch(batch, *PARAMS, 10)

    def long_trajectory():
        impl.lorenz_trajectory(z0, *PARAMS, 100_000)

    return {
        "2000x batch(7) windows of 10 steps": time_call(jacobian_style_batches),
        "single 100k-step trajectory": time_call(long_trajectory),
    }


def main():
    results = {"python": bench(_lorenz_py)}
    if _lorenz_cy is not None:
        results["cython"] = bench(_lorenz_cy)
    else:
        print("compiled extension not built; showing the fallback only")

    workloads = list(next(iter(results.values())))
    width = max(len(w) for w in workloads)
    header = f"{'workload':<{width}}  " + "".join(
        f"{name:>12}" for name in results)
    if len(results) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for w in workloads:
        line = f"{w:<{width}}  " + "".join(
            f"{results[name][w]:>11.4f}s" for name in results)
        if len(results) == 2:
            line += f"{results['python'][w] / results['cython'][w]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
