"""Command-line entry point: ``quantcycle <stage> --config cfg.json --out DIR``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import __version__
from .config import load_config
from .errors import ConvergenceError, DegenerateInputError, QuantCycleError
from .pipeline import STAGES, StageError, run_backtest, run_stage

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2

NUMERICAL = (ConvergenceError, DegenerateInputError, ArithmeticError, np.linalg.LinAlgError,
             RuntimeError)


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors, so they exit 1 rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quantcycle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="JSON config file")
    common.add_argument("--out", default="quantcycle-out", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    bt = sub.add_parser("backtest", parents=[common], help="run every stage in order")
    bt.add_argument("--stage", choices=STAGES, default=None, help="stop after this stage")
    return parser


def exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    return EXIT_NUMERICAL if isinstance(cause, NUMERICAL) else EXIT_VALIDATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        if args.command == "backtest":
            report = run_backtest(cfg, args.out, args.stage)
            if report.exists():
                print(report)
        else:
            run_stage(args.command, cfg, args.out)
    except (QuantCycleError, ValueError) + NUMERICAL as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
