#!/usr/bin/env python3
"""
Run one affine Volterra experiment and write its CSV/JSON results.

Usage:
    python -m src.scripts.volterra_cli cf --config config/heston_constant.json --out results/cf
    python -m src.scripts.volterra_cli hawkes-validate --config config/hawkes_exponential.json --seed 7 --threads 4

Exit status is 0 when every declared check passes, 1 when a check fails and 2 on a bad config.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from src.affine_volterra.config import VERSION, settings
from src.affine_volterra.errors import ConfigError
from src.affine_volterra.experiments import COMMANDS, RunConfig, load_config, run
from src.affine_volterra.metrics import MetricsRecorder

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Affine Volterra experiments")
    parser.add_argument("command", choices=sorted(COMMANDS), help="Experiment to run")
    parser.add_argument("--config", type=Path, help="JSON run config (defaults are used when omitted)")
    parser.add_argument("--seed", type=int, help="Override simulation.seed")
    parser.add_argument("--threads", type=int, default=settings.threads, help="Worker threads for batched solves")
    parser.add_argument("--out", type=Path, help="Output directory (default: <output_dir>/<command>)")
    parser.add_argument("--log-level", default=settings.log_level, help="Logging level")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.config and config.command != args.command:
        logger.warning(f"Config command {config.command!r} overridden by {args.command!r}")
    update = {"command": args.command}
    if args.seed is not None:
        update["simulation"] = config.simulation.model_copy(update={"seed": args.seed})
    return config.model_copy(update=update)


def resolve_output_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    """--out, then VOLTERRA_OUTPUT_DIR (environment or .env), then the config's output_dir"""
    if args.out:
        return args.out
    if "output_dir" in settings.model_fields_set:
        base = settings.output_dir
    else:
        base = config.output_dir or settings.output_dir
    return Path(base) / args.command


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        logger.error("--threads must be at least 1")
        return 2

    try:
        config = resolve_config(args)
    except ConfigError as e:
        logger.error(str(e))
        return 2

    out_dir = resolve_output_dir(args, config)
    report = run(config, threads=args.threads)
    report.write(out_dir)
    if args.command == "schema":
        (Path(out_dir) / "run_config.schema.json").write_text(json.dumps(RunConfig.model_json_schema(), indent=2))
    MetricsRecorder.write_textfile(Path(out_dir) / "metrics.prom")

    failed = [name for name, passed in report.checks.items() if not passed]
    if failed:
        logger.error(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 1
    logger.info(f"{args.command}: all {len(report.checks)} check(s) passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
