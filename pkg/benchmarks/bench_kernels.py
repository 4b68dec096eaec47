"""Time the compiled and numpy rate kernels on random cell batches.

    python3 benchmarks/bench_kernels.py [--batch 4096] [--K 2 3 6] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from cfnoma import kernels


def inputs(rng, B, K):
    S = rng.exponential(size=(B, K, K))
    ici = rng.exponential(size=(B, K))
    beta = (rng.uniform(size=(B, K, K)) > 0.5) * np.triu(np.ones((K, K)), 1)
    return S, ici, beta


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=4096)
    ap.add_argument("--K", type=int, nargs="+", default=[2, 3, 6])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    impls = kernels.implementations()
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(impls)}; batch {args.batch}; best of {args.repeat}")
    print(f"{'kernel':22s} {'K':>3s} " + " ".join(f"{n + ' (ms)':>12s}" for n in impls) + "  speedup")
    for K in args.K:
        S, ici, beta = inputs(rng, args.batch, K)
        bt = rng.uniform(size=beta.shape)
        cases = {
            "cell_interference": lambda impl: kernels.cell_interference(S, ici, beta, impl=impl),
            "convex_interference": lambda impl: kernels.convex_interference(S, ici, bt, impl=impl),
            "cell_rates": lambda impl: kernels.cell_rates(S, ici, beta, 1.0, impl=impl),
        }
        for name, fn in cases.items():
            ms = {n: 1e3 * min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat))
                  for n, m in impls.items()}
            sp = f"{ms['numpy'] / ms['cython']:7.1f}x" if "cython" in ms else "      -"
            print(f"{name:22s} {K:3d} " + " ".join(f"{v:12.3f}" for v in ms.values()) + "  " + sp)


if __name__ == "__main__":
    main()
