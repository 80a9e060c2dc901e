"""Time the numba and numpy paths of every compiled kernel.

    python benchmarks/bench_kernels.py [--size 128] [--repeat 5]

Each kernel is warmed up once per backend (so numba compile time is excluded)
and the best of ``--repeat`` runs is reported.
"""
import argparse
import time

import numpy as np

from granite import kernels


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size, rng):
    n_seeds = max(4, size * size // 100)
    seeds = rng.random((n_seeds, 2)) * size
    radii = rng.random(n_seeds) * 3.0
    mask = rng.random((size, size)) > 0.55
    yy, xx = np.mgrid[:size, :size]
    field = np.sin(yy / 5.0) * np.cos(xx / 7.0) + 0.01 * rng.random((size, size))
    mats = rng.normal(size=(size * size, 6, 6))
    vecs = rng.normal(size=(size * size, 6))
    return {
        "laguerre_assign": lambda b: kernels.laguerre_assign(size, size, seeds, radii, backend=b),
        "label_components": lambda b: kernels.label_components(mask, backend=b),
        "local_maxima": lambda b: kernels.local_maxima(field, backend=b),
        "batched_matvec6": lambda b: kernels.batched_matvec6(mats, vecs, backend=b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8}")
    for name, fn in cases(args.size, rng).items():
        tp = _best(lambda: fn("numpy"), args.repeat)
        tn = _best(lambda: fn("numba"), args.repeat)
        print(f"{name:<18} {tp * 1e3:11.2f} {tn * 1e3:11.2f} {tp / tn:7.1f}x")


if __name__ == "__main__":
    main()
