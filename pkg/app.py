"""
Relaxed-Control Solver command line
Entry point with run, verify-lq and export-noise subcommands
"""

import argparse
import sys
from typing import List, Optional

from loguru import logger

from models.exceptions import ConfigError, SolverError
from services.experiment_service import ExperimentService


def configure_logging(level: str = "INFO") -> None:
    """Send log records to stderr at the configured level"""
    logger.remove()
    logger.add(sys.stderr, level=level, format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relaxed-control",
        description="Mean-field Langevin solver for entropy-regularized relaxed stochastic control",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    run = subparsers.add_parser("run", help="Run the configured flow and write its artifacts")
    run.add_argument("config", help="Path to a key=value config file")

    verify = subparsers.add_parser("verify-lq", help="Run the linear-quadratic acceptance battery")
    verify.add_argument("config", help="Path to a key=value config file with problem=lq")
    verify.add_argument(
        "--tolerance-scale", type=float, default=None, help="Multiply every tolerance (overrides the config key)"
    )

    export = subparsers.add_parser("export-noise", help="Write the outer Brownian increments as a binary dump")
    export.add_argument("config", help="Path to a key=value config file")
    export.add_argument("path", help="Output file")
    return parser


# ------------------------------------------------------------------
# Commands
# ------------------------------------------------------------------

def _run(args: argparse.Namespace) -> int:
    config = ExperimentService.load_config(args.config)
    configure_logging(config.log_level)
    logger.info(f"🚀 Running experiment from {args.config}")
    return ExperimentService.run_experiment(config)


def _verify_lq(args: argparse.Namespace) -> int:
    config = ExperimentService.load_config(args.config)
    if args.tolerance_scale is not None:
        if not args.tolerance_scale > 0:
            raise ConfigError(f"invalid value for tolerance_scale: {args.tolerance_scale} (must be > 0)")
        config = config.model_copy(update={"tolerance_scale": args.tolerance_scale})
    configure_logging(config.log_level)
    report = ExperimentService.verify_lq(config)
    print(ExperimentService.format_report(report), end="")
    return 0 if report.passed else 1


def _export_noise(args: argparse.Namespace) -> int:
    config = ExperimentService.load_config(args.config)
    configure_logging(config.log_level)
    ExperimentService.export_noise(config, args.path)
    print(f"📁 Brownian increments written to {args.path}")
    return 0


COMMANDS = {
    "run": _run,
    "verify-lq": _verify_lq,
    "export-noise": _export_noise,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, dispatch, and map solver errors to exit codes

    Returns:
        int: 0 ok, 1 acceptance failure, 2 config/problem error, 3 numerical abort, 4 storage error
    """
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        return COMMANDS[args.command](args)
    except SolverError as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        print(f"❌ {e.detail}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
