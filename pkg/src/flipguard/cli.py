"""Command-line entry point.

Subcommands: ``zoo build``, ``matrix``, ``update``, ``sequential``,
``consistency`` and ``report``. Exit status is 0 on success, 2 on a
configuration error and 3 on a numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import SINGLE_METHODS, ExperimentConfig
from .data import DataError
from .harness import Experiment, emit_report, load_report, render_table
from .tensor import DomainError
from .updates import ConfigError, NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config (default: built-in desk benchmark)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--eval-iters", type=int, help="PGD iterations of the evaluation attack (default 50)")
    p.add_argument("--eps", type=float, help="L-infinity budget in feature units")
    p.add_argument("--method", choices=SINGLE_METHODS, help="restrict to one update method")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flipguard", description="Regression-aware model updates at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    zoo = sub.add_parser("zoo", help="model zoo operations")
    zoo_sub = zoo.add_subparsers(dest="action", required=True)
    _common(zoo_sub.add_parser("build", help="train the zoo, save checkpoints, report errors"))
    _common(sub.add_parser("matrix", help="naive-update NF/RNF matrix over all zoo pairs"))
    _common(sub.add_parser("update", help="single update of the configured pair with each method"))
    _common(sub.add_parser("sequential", help="chain of updates with fixed hyperparameters"))
    _common(sub.add_parser("consistency", help="estimator convergence rate and penalty frontier"))
    rep = sub.add_parser("report", help="print the table for an emitted JSON report")
    rep.add_argument("path", type=Path)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, output=args.out, eval_iters=args.eval_iters, epsilon=args.eps)


def run(args) -> int:
    if args.command == "report":
        sys.stdout.write(render_table(load_report(args.path)))
        return EXIT_OK
    cfg = _config(args)
    out = Path(cfg.output)
    ex = Experiment(cfg, out_dir=out)
    method = args.method
    if args.command == "zoo":
        report, stem = ex.zoo_report(), "zoo"
    elif args.command == "matrix":
        report, stem = ex.matrix_report(), "matrix"
    elif args.command == "update":
        report = ex.update_report([method] if method else None)
        stem = f"update-{method}" if method else "update"
    elif args.command == "sequential":
        if method == "naive":
            raise ConfigError("sequential updates need a training method (pct, pcat or rcat)")
        report = ex.sequential_report([method] if method else None)
        stem = f"sequential-{method}" if method else "sequential"
    else:
        report, stem = ex.consistency_report(), "consistency"
    json_path, txt_path = emit_report(report, out, stem)
    sys.stdout.write(render_table(report))
    sys.stdout.write(f"\nwrote {json_path} and {txt_path}\n")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, DomainError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
