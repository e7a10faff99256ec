"""Command line entry point: ``sgld-cmd <experiment> --config FILE``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import SgldError
from .harness import EXPERIMENTS, ExperimentConfig, apply_overrides, run_experiment

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sgld-cmd",
        description="Replicated SGLD experiments for the self-normalized moderate-deviation statistic.",
    )
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="JSON file with ExperimentConfig fields")
    p.add_argument("--seed", type=int, default=None, help="master seed (env: SGLD_CMD_SEED)")
    p.add_argument("--workers", type=int, default=None, help="worker processes (env: SGLD_CMD_WORKERS)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--audit", action="store_true", help="persist trajectories with their noise logs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.from_file(args.config, args.experiment)
        cfg = apply_overrides(cfg, args.seed, args.workers, args.out, args.audit)
        manifest = run_experiment(cfg)
    except (SgldError, ValueError, ArithmeticError, OSError) as exc:
        print(f"sgld-cmd: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for name, check in manifest.checks.items():
        print(f"{'PASS' if check.get('pass') else 'FAIL'} {name}")
    print(f"wrote {cfg.out}/manifest.json")
    return EXIT_PASS if manifest.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
