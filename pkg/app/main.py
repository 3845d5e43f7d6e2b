"""sms - spectral modeling synthesis toolkit: command-line entry point."""
from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence

from app.commands import EXIT_USAGE, figures, gradcheck, logs, prepare, run, train
from app.config import settings
from app.version import APP_VERSION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sms",
        description="Differentiable harmonic-plus-noise synthesis: prepare, train, render.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {APP_VERSION}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    for module in (prepare, train, run, gradcheck, figures, logs):
        module.register(subparsers)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.DEBUG if settings.debug else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
