"""Time the compiled and NumPy kernel backends on pipeline-sized inputs.

    python3 benchmarks/bench_kernels.py [--n 20000] [--d 25] [--repeat 3] [--json out.json]
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from geomext import jsonio, kernels
from geomext.geometry import correlation_factor
from geomext.ingest import pairwise_distances
from geomext.synthetic import SyntheticSpec, generate_matrix


def cases(n: int, d: int, seed: int = 0):
    spec = SyntheticSpec("MetaGaussian", d, n, 1.0, 1.5, seed=seed)
    Z = generate_matrix(spec)
    coords = spec.coords()
    pi, pj = np.triu_indices(d, 1)
    rho = np.exp(-(pairwise_distances(coords)[pi, pj] / 1.2) ** 1.3)
    ZT = np.ascontiguousarray(Z.T)
    R = Z.sum(axis=1)
    W = Z / R[:, None]
    Linv = correlation_factor(coords, 1.0, 1.5).chol_inv
    q = np.full(d, 3.0)
    blocks = np.ascontiguousarray(np.stack([Z[i:i + 4] for i in range(0, min(n, 20000) - 4, 4)]))
    return {
        "pairwise_loglik": lambda impl: kernels.pairwise_loglik(ZT, pi, pj, rho, 0.8, impl=impl),
        "gauge_batch": lambda impl: kernels.gauge_batch(W, Linv, 1.3, impl=impl),
        "critical_scale": lambda impl: kernels.critical_scale(W, q, max(1, d // 4), impl=impl),
        "window_critical_scale": lambda impl: kernels.window_critical_scale(blocks, q, 3, 2, impl=impl),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--d", type=int, default=25)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; timing the NumPy fallback only", file=sys.stderr)
    rows = []
    for name, fn in cases(args.n, args.d).items():
        times = {}
        for bname, impl in backends.items():
            fn(impl)  # warm up
            times[bname] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        rows.append({"kernel": name, **{f"{b}_s": t for b, t in times.items()}, "speedup": speedup})
        cols = "  ".join(f"{b}={t * 1e3:9.2f} ms" for b, t in times.items())
        print(f"{name:<22} {cols}  speedup={speedup:6.1f}x")
    if args.json:
        jsonio.dump({"n": args.n, "d": args.d, "results": rows}, args.json)
    return 0


if __name__ == "__main__":
    sys.exit(main())
