"""Monte-Carlo recovery study for the two-stage fit on MetaGaussian data.

    python3 benchmarks/mc_recovery.py [--reps 20] [--d 9] [--n 50000] [--out tests/fixtures/mc_recovery.json]

Each repetition draws a fresh seed, runs fit_pairwise then
fit_truncated_gamma and records both stages. The summary reports the
fraction of repetitions inside the acceptance tolerances.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from geomext import jsonio
from geomext.fit import exceedances, fit_pairwise, fit_truncated_gamma, threshold_params
from geomext.synthetic import SyntheticSpec, generate_matrix

PHI, KAPPA = 1.0, 1.5
GAMMA_RANGE = (1.7, 2.3)
PHI_REL, KAPPA_ABS = 0.3, 0.3


def one_rep(d: int, n: int, seed: int, tau: float) -> dict:
    spec = SyntheticSpec("MetaGaussian", d, n, PHI, KAPPA, seed=seed)
    Z = generate_matrix(spec)
    t0 = time.perf_counter()
    pw = fit_pairwise(Z, spec.coords(), tau)
    init = threshold_params(pw, spec.coords())
    exc, _ = exceedances(Z, init)
    fm = fit_truncated_gamma(exc, init)
    p = fm.params
    return {
        "seed": seed,
        "pairwise": {"phi": pw.phi, "kappa": pw.kappa, "c_tau": pw.c_tau},
        "tg": {"lam": p.lam, "phi": p.phi, "kappa": p.kappa, "gamma": p.gamma, "loglik": fm.loglik,
               "grad_max_abs": fm.convergence["grad_max_abs"]},
        "n_exceedances": exc.n,
        "seconds": time.perf_counter() - t0,
    }


def within(rep: dict) -> dict:
    tg = rep["tg"]
    return {
        "gamma": GAMMA_RANGE[0] <= tg["gamma"] <= GAMMA_RANGE[1],
        "phi": abs(tg["phi"] / PHI - 1) <= PHI_REL,
        "kappa": abs(tg["kappa"] - KAPPA) <= KAPPA_ABS,
        "pairwise_phi": abs(rep["pairwise"]["phi"] / PHI - 1) <= PHI_REL,
        "pairwise_kappa": abs(rep["pairwise"]["kappa"] - KAPPA) <= KAPPA_ABS,
    }


def summarise(reps: list[dict]) -> dict:
    flags = [within(r) for r in reps]
    keys = flags[0].keys()
    out = {"hit_rate": {k: float(np.mean([f[k] for f in flags])) for k in keys}}
    for stage, names in (("pairwise", ("phi", "kappa")), ("tg", ("lam", "phi", "kappa", "gamma"))):
        for name in names:
            v = np.array([r[stage][name] for r in reps])
            out[f"{stage}_{name}"] = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                                      "min": float(v.min()), "max": float(v.max())}
    out["all_criteria_rate"] = float(np.mean([f["gamma"] and f["phi"] and f["kappa"] for f in flags]))
    out["max_seconds"] = float(max(r["seconds"] for r in reps))
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--d", type=int, default=9)
    ap.add_argument("--n", type=int, default=50_000)
    ap.add_argument("--tau", type=float, default=0.8)
    ap.add_argument("--seed0", type=int, default=1000)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    reps = []
    for i in range(args.reps):
        rep = one_rep(args.d, args.n, args.seed0 + i, args.tau)
        reps.append(rep)
        tg = rep["tg"]
        print(f"rep {i:2d} seed {rep['seed']}  pw phi={rep['pairwise']['phi']:.3f} kappa={rep['pairwise']['kappa']:.3f}"
              f"  tg lam={tg['lam']:.3f} phi={tg['phi']:.3f} kappa={tg['kappa']:.3f} gamma={tg['gamma']:.3f}"
              f"  {rep['seconds']:.0f}s", flush=True)
    report = {"design": {"kind": "MetaGaussian", "d": args.d, "n": args.n, "phi": PHI, "kappa": KAPPA,
                         "tau": args.tau, "seed0": args.seed0, "reps": args.reps,
                         "tolerances": {"gamma": list(GAMMA_RANGE), "phi_rel": PHI_REL, "kappa_abs": KAPPA_ABS}},
              "summary": summarise(reps), "reps": reps}
    print(jsonio.dumps(report["summary"]))
    if args.out:
        jsonio.dump(report, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
