"""Compare the compiled and numpy backends of the batched reduced solves.

Usage::

    python benchmarks/bench_kernels.py [--batch 64] [--sizes 10,28,60,111] [--repeat 20]

For each reduced dimension N the script times one ``factor_solve`` (LU of B
dense N x N systems plus the solve) followed by one ``solve_transpose`` (the
adjoint solve reusing the factors), checks that both backends agree, and
prints the median wall time per call pair.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from pdednn import kernels


def make_batch(rng, b, n):
    # diagonally shifted random matrices resemble reduced diffusion operators
    mats = rng.normal(size=(b, n, n)) + n * np.eye(n)
    return mats, rng.normal(size=(b, n)), rng.normal(size=(b, n))


def time_backend(mod, mats, rhs, adj, repeat):
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        u, factor, _ = mod.factor_solve(mats, rhs)
        lam = mod.solve_transpose(factor, adj)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), u, lam


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--sizes", default="10,28,60,111")
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the python backend is timed")
    rng = np.random.default_rng(args.seed)
    names = sorted(backends)
    print(f"batch={args.batch} repeat={args.repeat} default backend={kernels.BACKEND}")
    print("N".rjust(5) + "".join(f"{n:>14}" for n in names) + "     speedup   max|diff|")
    for n in (int(s) for s in args.sizes.split(",")):
        mats, rhs, adj = make_batch(rng, args.batch, n)
        res = {name: time_backend(backends[name], mats, rhs, adj, args.repeat) for name in names}
        line = f"{n:5d}" + "".join(f"{res[name][0] * 1e3:11.3f} ms" for name in names)
        if len(names) == 2:
            (tc, uc, lc), (tp, up, lp) = res["compiled"], res["python"]
            diff = max(np.max(np.abs(uc - up)), np.max(np.abs(lc - lp)))
            line += f"  {tp / tc:9.2f}x  {diff:10.2e}"
        print(line)


if __name__ == "__main__":
    main()
