"""Command-line entry point: one subcommand per experiment kind.

Exit codes: 0 success, 2 infeasible configuration, 1 internal error.
BLAS threading is pinned to one thread before numpy loads so that results
are byte-identical regardless of the --threads worker count.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402

from .config import ConfigError, ProblemConfig, benchmark_config  # noqa: E402
from .experiments import EXPERIMENT_KINDS, ExperimentSpec, run_experiment  # noqa: E402
from .state_evolution import SeSolverError, load_se_cache, save_se_cache  # noqa: E402
from .variance_oracle import InfeasibleError  # noqa: E402

DEFAULT_REPS = {
    "variance_inflation": 1000,
    "qq": 2000,
    "ratio_curves": 2,
    "between_pair": 1000,
    "loocv_curve": 300,
    "robustness": 1000,
    "ols_existence": 100,
    "se_validation": 60,
}

DEFAULT_OUTER = {"variance_inflation": 50}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossfit-aipw",
        description="Cross-fit AIPW experiments under proportional asymptotics",
    )
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in EXPERIMENT_KINDS:
        sp = sub.add_parser(kind.replace("_", "-"), help=f"run the {kind} experiment")
        sp.add_argument("--config", type=str, default=None,
                        help="JSON file with ProblemConfig fields")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
        sp.add_argument("--reps", type=int, default=None)
        sp.add_argument("--outer-reps", type=int, default=None)
        sp.add_argument("--out-dir", type=str, default="out")
        sp.add_argument("--scale", type=float, default=1 / 3,
                        help="(n, p) scale relative to the full-size benchmark")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--full-scale", action="store_true",
                        help="use the full-size benchmark problem")
        sp.add_argument("--grid", type=str, default=None,
                        help="JSON object with experiment-specific grids")
        sp.add_argument("--se-cache", type=str, default=None,
                        help="JSON file to reuse/store solved SE parameters")
    return parser


def _load_config(args) -> ProblemConfig:
    if args.config is not None:
        with open(args.config) as fh:
            cfg = ProblemConfig.from_json(fh.read())
    else:
        scale = 1.0 if args.full_scale else args.scale
        cfg = benchmark_config(scale=scale)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    kind = args.kind.replace("-", "_")
    try:
        cfg = _load_config(args)
        spec = ExperimentSpec(
            kind=kind,
            base=cfg,
            reps=args.reps if args.reps is not None else DEFAULT_REPS[kind],
            outer_reps=(args.outer_reps if args.outer_reps is not None
                        else DEFAULT_OUTER.get(kind, 1)),
            grid=json.loads(args.grid) if args.grid else {},
            out_dir=args.out_dir,
        )
        if args.se_cache:
            load_se_cache(args.se_cache)
        result = run_experiment(spec, threads=max(1, args.threads))
        if args.se_cache:
            save_se_cache(args.se_cache)
    except (InfeasibleError, SeSolverError, ConfigError) as exc:
        print(f"infeasible configuration: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({k: v for k, v in result.items() if not isinstance(v, dict)},
                     indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
