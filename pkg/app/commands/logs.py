"""logs: tail of the application log, filtered by level."""
from __future__ import annotations

import argparse

from app.applog import tail_app_log
from app.commands import EXIT_OK, guarded
from app.config import settings


def register(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser(
        "logs", help="show the application log",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--tail", type=int, default=200, help="last N lines (0 = all)")
    p.add_argument("--level", choices=["debug", "info", "warn", "error"],
                   default=settings.log_level, help="minimum level shown")
    p.set_defaults(func=cmd_logs)


@guarded("logs")
def cmd_logs(args: argparse.Namespace) -> int:
    for line in tail_app_log(args.tail, args.level):
        print(line)
    return EXIT_OK
