"""Command-line entry point.

Exit codes: 0 all checks pass, 1 a property check failed, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .core import ConfigurationError
from .harness import ExperimentConfig, InconclusiveRateError, default_config, run_experiment, write_outputs

COMMANDS = {
    "operators": "operator_suite",
    "micro-meso": "micro_to_meso",
    "meso-macro": "meso_to_macro",
    "full-limit": "full_limit",
    "free-energy": "free_energy",
}

log = logging.getLogger("kawasaki_twoscale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kawasaki-twoscale",
                                     description="Convergence experiments for two-scale Kawasaki dynamics.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in COMMANDS.items():
        p = sub.add_parser(name, help=f"run the {kind.replace('_', ' ')} experiment")
        p.add_argument("--config", help="JSON config file (defaults to the built-in settings)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory (default: out/<command>)")
        p.add_argument("--threads", type=int, help="worker threads for ensemble runs")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    kind = COMMANDS[args.command]
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
        if cfg.kind != kind:
            raise ConfigurationError(f"config kind {cfg.kind!r} does not match command {args.command!r}")
    else:
        cfg = default_config(kind)
        cfg.outdir = f"out/{args.command}"
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.outdir = args.out
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigurationError("--threads must be at least 1")
        cfg.threads = args.threads
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        report, table = run_experiment(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except InconclusiveRateError as exc:
        print(f"inconclusive: {exc}", file=sys.stderr)
        return 1
    paths = write_outputs(report, cfg.outdir, table)
    summary = {"kind": report.kind, "passed": report.passed,
               "failed_checks": sorted(k for k, v in report.checks.items() if not v)}
    if report.fit:
        summary["slope"] = report.fit["slope"]
        summary["slope_interval"] = report.fit["interval"]
    summary["report"] = paths["report"]
    print(json.dumps(summary, indent=2))
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
