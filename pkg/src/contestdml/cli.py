"""Command-line driver: ``contestdml {simulate,estimate,report,descriptives,support}``.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, ContestDMLError
from .pipeline import (CONFIG_VERSION, RunConfig, _load_yaml, run_descriptives, run_estimate, run_report,
                       run_simulate, run_support, sim_config_from_mapping)


def _run_config(args) -> RunConfig:
    """Config file (if any) overlaid with the command-line flags."""
    if args.config:
        raw = _load_yaml(args.config)
        base = Path(args.config).parent
    else:
        raw, base = {"version": CONFIG_VERSION}, Path(".")
    flags = {
        "data": args.data, "columns": args.columns, "output_dir": args.output_dir, "seed": args.seed,
        "scores": args.scores, "folds": args.folds, "se_type": args.se_type, "level": args.level,
        "threads": args.threads,
    }
    for key, value in flags.items():
        if value is not None:
            raw[key] = str(Path(value).resolve()) if key in ("data", "columns", "scores", "output_dir") else value
    if args.trim is not None:
        raw["trim"] = list(args.trim)
    if args.cluster_folds:
        raw["cluster_folds"] = True
    learner = dict(raw.get("learner") or {})
    if args.n_trees is not None:
        learner["n_trees"] = args.n_trees
    if args.min_leaf is not None:
        learner["min_leaf"] = args.min_leaf
    if learner:
        raw["learner"] = learner
    return RunConfig.from_mapping(raw, base)


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run configuration (version 1)")
    p.add_argument("--data", help="input CSV")
    p.add_argument("--columns", help="YAML column spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--scores", help="cached scores CSV; skips nuisance estimation")
    p.add_argument("--folds", type=int)
    p.add_argument("--cluster-folds", action="store_true")
    p.add_argument("--trim", type=float, nargs=2, metavar=("LOW", "HIGH"))
    p.add_argument("--se-type", choices=("robust", "cluster"))
    p.add_argument("--level", type=float, help="confidence level (default 0.90)")
    p.add_argument("--n-trees", type=int)
    p.add_argument("--min-leaf", type=int, nargs="+")
    p.add_argument("--threads", type=int, help="worker threads for forest fitting (results do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contestdml", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a dataset with known effects")
    p.add_argument("--config", help="YAML simulation config (version 1)")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--stem", default="simulated")
    p.add_argument("--n", type=int, dest="n_matches")
    p.add_argument("--seed", type=int)
    p.add_argument("--dgp", dest="dgp_kind", choices=("contest", "best-of-k", "generic-linear"))
    p.add_argument("--delta", type=float)
    p.add_argument("--timings", action="store_true", help="record stage timings in the manifest")

    p = sub.add_parser("estimate", help="cross-fit nuisances and run the estimators")
    _add_run_flags(p)
    p.add_argument("--timings", action="store_true", help="record stage timings in the manifest")

    p = sub.add_parser("report", help="summarise a finished run directory")
    p.add_argument("run_dir")

    p = sub.add_parser("descriptives", help="descriptive statistics by treatment arm")
    p.add_argument("--data", required=True)
    p.add_argument("--columns", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("support", help="propensity overlap diagnostics")
    _add_run_flags(p)
    p.add_argument("--out", required=True)
    return parser


def _simulate(args) -> None:
    raw = {}
    if args.config:
        raw = _load_yaml(args.config)
        if raw.pop("version", None) != CONFIG_VERSION:
            raise ConfigError(f"simulation config needs 'version: {CONFIG_VERSION}'")
    for key in ("n_matches", "seed", "dgp_kind", "delta"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    manifest = run_simulate(sim_config_from_mapping(raw), args.output_dir, args.stem, args.timings)
    print(f"simulated {manifest.summary['n']} rows, true ATE {manifest.summary['true_ate']:.6f}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            _simulate(args)
        elif args.command == "estimate":
            manifest = run_estimate(_run_config(args), args.timings)
            a = manifest.summary["ate"]
            print(f"ATE {a['estimate']:.6f} (se {a['std_error']:.6f})")
            for w in manifest.warnings:
                print(f"warning: {w}", file=sys.stderr)
        elif args.command == "report":
            print(run_report(args.run_dir))
        elif args.command == "descriptives":
            print(run_descriptives(args.data, args.columns, args.out))
        elif args.command == "support":
            summary = run_support(_run_config(args), args.out)
            print("support concern" if summary["support_concern"] else "support ok")
    except ContestDMLError as exc:
        stage = getattr(exc, "stage", None)
        print(f"error{f' in {stage}' if stage else ''}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
