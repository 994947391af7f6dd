"""Time the compiled loop kernels against their pure-Python fallbacks.

    python benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from transflower import _kernels_py as pure
from transflower import kernels, locenc


def cases(rng):
    rl = rng.normal(size=(20000, 2)) * 5000
    yield "multiscale_pe (20k x 16 scales)", lambda k: k.multiscale_pe(rl, locenc.BASIS_A, 1.0, 20000.0, 16)

    xy = rng.uniform(0, 10000, size=(300, 2))
    D = np.hypot(*(xy[:, None] - xy[None]).transpose(2, 0, 1))
    pops = rng.uniform(0, 1000, size=300)
    yield "intervening_population (300 regions)", lambda k: k.intervening_population(D, pops)

    n = 20000
    logm, logr = rng.normal(size=n), rng.normal(size=n) + 7
    offsets = np.arange(0, n + 1, 50, dtype=np.int64)
    target = np.full(n, 1 / 50)
    betas, gammas = np.linspace(0, 3, 21), np.linspace(0, 5, 21)
    yield "gravity_grid_loss (441 pts x 20k pairs)", lambda k: k.gravity_grid_loss(
        betas, gammas, logm, logr, target, offsets)

    cells = rng.uniform(-1200, 1200, size=(200000, 2))
    yield "bin_cells (200k flows)", lambda k: k.bin_cells(cells, 20.0, 1000.0)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    print(f"{'kernel':42s} {'pure (s)':>10s} {'compiled (s)':>13s} {'speedup':>8s}")
    for name, run in cases(np.random.default_rng(0)):
        tp = best_of(lambda: run(pure), args.repeat)
        tc = best_of(lambda: run(kernels.compiled), args.repeat)
        print(f"{name:42s} {tp:10.4f} {tc:13.4f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
