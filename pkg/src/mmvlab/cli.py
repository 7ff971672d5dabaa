"""Command line entry point.

    mmvlab run <config.json> --experiment <name> [--seed N] [--workers K] [--out DIR]

Exit codes: 0 success, 2 validation, 3 solver failure, 4 verification failure.
Validation errors are printed to stdout as JSON.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, ExperimentConfig
from .model import ValidationError
from .runner import EXIT_VALIDATION, EXPERIMENTS, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmvlab", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment from a JSON config")
    run.add_argument("config", help="path to the experiment JSON document")
    run.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    run.add_argument("--seed", type=int, default=None, help="override the first verification seed")
    run.add_argument("--workers", type=int, default=1, help="worker threads for path simulation")
    run.add_argument("--out", default=None, help="output directory (default: config 'output')")
    return parser


def _validation_failure(exc: ValidationError) -> int:
    payload = exc.to_dict() if isinstance(exc, ConfigError) else \
        {"error": "validation", "errors": [{"path": "/", "message": str(exc)}]}
    print(json.dumps(payload, sort_keys=True))
    return EXIT_VALIDATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError([{"path": "--workers", "message": "must be >= 1"}])
        if args.seed is not None and args.seed < 0:
            raise ConfigError([{"path": "--seed", "message": "must be >= 0"}])
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ValidationError as exc:
        return _validation_failure(exc)
    code = run_experiment(cfg, args.experiment, args.out, args.workers)
    out = args.out if args.out is not None else cfg.output
    with open(f"{out}/summary.json") as fh:
        summary = json.load(fh)
    for band in summary["bands"]:
        print(f"{'PASS' if band['passed'] else 'FAIL'}  {band['name']}  "
              f"(observed {band['observed']:.6g}, threshold {band['threshold']:.6g})")
    if "error" in summary:
        print(json.dumps(summary["error"], sort_keys=True))
    print(f"{summary['status']}: {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
