"""CLI subcommands: one module per workflow, each exposing register(subparsers)."""
from __future__ import annotations

import argparse
import functools
import sys
from collections.abc import Callable

from app.applog import append_app_log
from app.version import APP_VERSION

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

Command = Callable[[argparse.Namespace], int]


def fail(message: str, code: int = EXIT_FAILURE) -> int:
    """One-line diagnostic to stderr and the app log."""
    line = " ".join(message.split())
    print(f"error: {line}", file=sys.stderr)
    append_app_log(line, "error")
    return code


def guarded(name: str) -> Callable[[Command], Command]:
    """Log the command start and turn any exception into a one-line failure."""

    def wrap(func: Command) -> Command:
        @functools.wraps(func)
        def run(args: argparse.Namespace) -> int:
            append_app_log(f"{name} started (v{APP_VERSION})", "debug")
            try:
                return func(args)
            except KeyboardInterrupt:
                return fail(f"{name}: interrupted", 130)
            except Exception as e:
                return fail(f"{name}: {e}")

        return run

    return wrap
