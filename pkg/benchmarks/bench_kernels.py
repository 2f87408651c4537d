"""Compare the compiled and numpy Sinkhorn kernels on the solve sizes training uses.

    python benchmarks/bench_kernels.py [--repeats 20] [--seed 0]
"""

import argparse
import time

import numpy as np

from sinkflow import kernels

# (n, m, d): oracle-suite batches, a toy training batch, a default training batch
SIZES = [(5, 5, 4), (16, 16, 10), (64, 64, 11), (256, 256, 11)]


def bench(mod, C, eps, repeats, max_iter):
    n, m = C.shape
    loga, logb = np.full(n, -np.log(n)), np.full(m, -np.log(m))
    mod.sinkhorn_log(C, loga, logb, eps, max_iter, 1e-9, 10)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        f, g, it, err = mod.sinkhorn_log(C, loga, logb, eps, max_iter, 1e-9, 10)
    return (time.perf_counter() - t0) / repeats, it, f


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-iter", type=int, default=1000)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the numpy fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"{'n':>5} {'m':>5} {'d':>3} {'iters':>6} " + " ".join(f"{b + ' ms':>12}" for b in backends)
          + (f" {'speedup':>8}" if len(backends) > 1 else ""))
    for n, m, d in SIZES:
        x, y = rng.random((n, d)), rng.random((m, d))
        C = np.ascontiguousarray(kernels._kernels_py.sqeuclidean(x, y))
        eps = 0.05 * C.mean()
        times, pots = {}, []
        for name, mod in backends.items():
            times[name], it, f = bench(mod, C, eps, args.repeats, args.max_iter)
            pots.append(np.asarray(f))
        line = f"{n:>5} {m:>5} {d:>3} {it:>6} " + " ".join(f"{1e3 * t:>12.3f}" for t in times.values())
        if len(times) > 1:
            line += f" {times['python'] / times['cython']:>7.1f}x"
            assert np.allclose(pots[0], pots[1], atol=1e-8), "backends disagree"
        print(line)


if __name__ == "__main__":
    main()
