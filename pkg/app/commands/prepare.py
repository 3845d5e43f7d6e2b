"""prepare: chunk raw recordings into a dataset directory with feature sidecars and stats."""
from __future__ import annotations

import argparse
from pathlib import Path

from app.applog import append_app_log
from app.commands import EXIT_OK, EXIT_USAGE, fail, guarded
from app.store import save_dataset
from app.trainer import make_dataset


def register(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser(
        "prepare", help="build a dataset directory from audio recordings",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--input", type=Path, action="append", required=True,
                   help="directory of recordings (repeat for mixed datasets)")
    p.add_argument("--output", type=Path, required=True, help="dataset directory to write")
    p.add_argument("--with-mfcc", action="store_true", help="also write 30-dim MFCC sidecars")
    p.add_argument("--seconds", type=float, default=4.0, help="example length in seconds")
    p.add_argument("--workers", type=int, default=None,
                   help="feature extraction threads (default: SMS_WORKERS)")
    p.set_defaults(func=cmd_prepare)


@guarded("prepare")
def cmd_prepare(args: argparse.Namespace) -> int:
    missing = [d for d in args.input if not d.is_dir()]
    if missing:
        return fail(f"prepare: input directory {missing[0]} does not exist", EXIT_USAGE)
    dataset = make_dataset(args.input, args.seconds, args.with_mfcc, args.workers)
    written = save_dataset(dataset, args.output)
    s = dataset.stats
    append_app_log(f"prepared {len(written)} chunks in {args.output}")
    print(f"{len(written)} chunks -> {args.output}")
    print(f"mean MIDI pitch {s.mean_midi_pitch:.2f}, loudness {s.mean_loudness_db:.2f}"
          f" +- {s.std_loudness_db:.2f} dB")
    return EXIT_OK
