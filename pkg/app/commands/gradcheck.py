"""grad-check: finite-difference verification of the autodiff engine in 64-bit."""
from __future__ import annotations

import argparse

from app.commands import EXIT_FAILURE, EXIT_OK, guarded
from app.gradcheck import case_names, run_suite


def register(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser(
        "grad-check", help="compare analytic gradients with central differences",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--seconds", type=float, default=0.25, help="clip length for the full graph")
    p.add_argument("--seed", type=int, default=0, help="seed for inputs and coordinate picks")
    p.add_argument("--coords", type=int, default=64, help="coordinates checked per parameter")
    p.add_argument("--case", action="append", choices=case_names(), default=None,
                   help="run only this case (repeatable; default: all)")
    p.set_defaults(func=cmd_gradcheck)


@guarded("grad-check")
def cmd_gradcheck(args: argparse.Namespace) -> int:
    reports = run_suite(seed=args.seed, coords=args.coords, seconds=args.seconds, only=args.case)
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        kinks = sum(len(x.excluded) for x in r.results.values())
        print(f"{r.case:<16} {status:<4} max rel err {r.worst:.2e} (tol {r.tolerance:g},"
              f" {kinks} kinks excluded)")
        if not r.passed:
            for res in r.results.values():
                if res.max_rel_error >= r.tolerance:
                    print(f"    {res.name}: {res.max_rel_error:.2e}")
    failed = [r.case for r in reports if not r.passed]
    if failed:
        print(f"grad-check failed: {', '.join(failed)}")
        return EXIT_FAILURE
    return EXIT_OK
