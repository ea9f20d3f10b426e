"""Command-line entry point: run, validate, list experiments, render reports."""

from __future__ import annotations

import argparse
import json
import sys

from .errors import SchemaError, UnknownExperiment
from .experiments import EXPERIMENT_IDS, parse_config, run_experiment, serialize_config


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sbsampler",
        description="Schrodinger bridge sampler experiment runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment from a config file")
    run_p.add_argument("config")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--reps", type=int, default=None)
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--threads", type=int, default=None)

    val_p = sub.add_parser("validate", help="parse and echo a config file")
    val_p.add_argument("config")

    sub.add_parser("list-experiments", help="print known experiment ids")

    rep_p = sub.add_parser("report", help="render figures for a finished run directory")
    rep_p.add_argument("run_dir")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "list-experiments":
            for name in EXPERIMENT_IDS:
                print(name)
            return 0
        if args.command == "validate":
            cfg = parse_config(args.config)
            sys.stdout.write(serialize_config(cfg))
            return 0
        if args.command == "report":
            from .report import render_run

            for path in render_run(args.run_dir):
                print(path)
            return 0
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.reps is not None:
            cfg.reps = args.reps
        if args.threads is not None:
            cfg.threads = args.threads
        summary = run_experiment(cfg, out_dir=args.out)
        json.dump(summary, sys.stdout, indent=1)
        print()
        return 0
    except (SchemaError, UnknownExperiment, FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
