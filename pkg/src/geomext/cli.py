"""Command-line entry point.

Exit codes: 0 success, 2 validation, 3 numerical failure, 4 missing upstream
artifact.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_DEPENDENCY = 0, 2, 3, 4

SUBCOMMANDS = {
    "preprocess": ("preprocess",),
    "margins": ("margins",),
    "deform": ("deform",),
    "fit": ("fit-pairwise", "fit-tg"),
    "diagnose": ("diagnose",),
    "simulate": ("simulate",),
    "estimate-ctq": ("estimate-ctq",),
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config JSON")
    common.add_argument("--run-id", type=int, default=None, help="restrict to one run")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS/worker threads")
    common.add_argument("--out", default=None, help="artifact directory")
    common.add_argument("--force", action="store_true", help="recompute even when cached")
    common.add_argument("--tau", type=float, default=None)
    common.add_argument("--u-chi", type=float, default=None)
    common.add_argument("--m-sim", type=int, default=None)
    common.add_argument("--n-boot", type=int, default=None, dest="bootstrap_reps")
    common.add_argument("--block-len", type=int, default=None)

    p = argparse.ArgumentParser(prog="geomext", description="Geometric extremes pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="all stages in order")
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name == "simulate":
            sp.add_argument("--k", type=float, default=None, dest="sim_k")
            sp.add_argument("--m", type=int, default=None, dest="sim_m")
    sub.add_parser("report", parents=[common], help="collate Table-1/2 style CSVs")

    syn = sub.add_parser("synth", help="write a synthetic dataset and a matching config")
    syn.add_argument("--kind", default="MetaGaussian",
                     choices=["MetaGaussian", "IndependentExp", "Comonotone", "KnownGaugeRejection"])
    syn.add_argument("--d", type=int, default=9)
    syn.add_argument("--n", type=int, default=20_000)
    syn.add_argument("--phi", type=float, default=1.0)
    syn.add_argument("--kappa", type=float, default=1.5)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--runs", type=int, default=1)
    syn.add_argument("--scale", choices=["raw", "exponential"], default="exponential",
                     help="CTQ threshold scale written to the config")
    syn.add_argument("--out", required=True, help="directory for CSVs and config.json")
    return p


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def _synth(args) -> int:
    from geomext import jsonio, synthetic
    from geomext.ingest import write_dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for i in range(1, args.runs + 1):
        spec = synthetic.SyntheticSpec(args.kind, args.d, args.n, args.phi, args.kappa, seed=args.seed + i - 1,
                                       run_id=i)
        write_dataset(synthetic.generate(spec), out / f"run{i}.csv")
        runs.append({"run_id": i, "path": f"run{i}.csv"})
    # exponential-scale thresholds at the same marginal levels as the defaults
    ctqs = [{"name": "CTQ1", "kind": "AllExceed", "threshold": 1.7, "scale": args.scale},
            {"name": "CTQ2", "kind": "AtLeastM", "threshold": 5.7, "scale": args.scale, "m": max(1, args.d // 4)},
            {"name": "CTQ3", "kind": "ConsecutiveRun", "threshold": 5.0, "scale": args.scale, "m": max(1, args.d // 8),
             "run_len": 2}]
    jsonio.dump({"runs": runs, "out": "out", "seed": args.seed, "ctqs": ctqs}, out / "config.json")
    print(out / "config.json")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "synth":
        return _synth(args)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    # heavy imports after the thread caps are in place
    from geomext import pipeline
    from geomext.errors import DependencyError, DomainError, FitError, GeomExtError, NumericalError, SamplingError

    try:
        cfg = pipeline.PipelineConfig.load(args.config)
        overrides = {k: getattr(args, k, None) for k in
                     ("seed", "threads", "tau", "u_chi", "m_sim", "bootstrap_reps", "block_len", "sim_k", "sim_m")}
        if args.out is not None:
            overrides["out"] = str(Path(args.out).resolve())
        cfg = cfg.with_(**overrides)
        cfg.validate()
        run_ids = None if args.run_id is None else [cfg.run(args.run_id).run_id]
    except (DomainError, OSError, ValueError, KeyError, TypeError) as e:
        _error("validation", str(e))
        return EXIT_VALIDATION

    try:
        if args.command == "report":
            pipeline.report(cfg)
            print(Path(cfg.out) / "report.json")
            return EXIT_OK
        stages = pipeline.STAGES if args.command == "run" else SUBCOMMANDS[args.command]
        status = pipeline.run_pipeline(cfg, run_ids, stages, force=args.force)
        if args.command == "simulate":
            for rid in status:
                art = pipeline.RunContext(cfg, rid).artifact("simulate")
                print(json.dumps({"run_id": rid, **art["result"]["summary"]}))
        else:
            print(json.dumps({str(k): v for k, v in status.items()}))
        return EXIT_OK
    except DependencyError as e:
        _error("dependency", str(e), stage=e.stage, required=e.required)
        return EXIT_DEPENDENCY
    except pipeline.StageError as e:
        rec = e.record()
        cause = e.cause
        if isinstance(cause, DependencyError):
            _error("dependency", str(cause), stage=cause.stage, required=cause.required)
            return EXIT_DEPENDENCY
        if isinstance(cause, (FitError, NumericalError, SamplingError, ArithmeticError, FloatingPointError)):
            _error("numerical", rec["message"], stage=rec["stage"], run_id=rec["run_id"])
            return EXIT_NUMERICAL
        if isinstance(cause, GeomExtError):
            _error("validation", rec["message"], stage=rec["stage"], run_id=rec["run_id"])
            return EXIT_VALIDATION
        raise


if __name__ == "__main__":
    sys.exit(main())
