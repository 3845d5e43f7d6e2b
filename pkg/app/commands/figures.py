"""figures: loss summaries and spectrogram images from run artifacts."""
from __future__ import annotations

import argparse
from pathlib import Path

from app.audio_io import read_wav
from app.commands import EXIT_OK, EXIT_USAGE, fail, guarded
from app.figures import (
    SMOOTH_WINDOW,
    loss_curve_pgm,
    read_loss_log,
    spectrogram_pgm,
    write_loss_summary,
)


def register(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser(
        "figures", help="write loss summaries and spectrogram PGM images",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--losslog", type=Path, default=None, help="loss.csv from a training run")
    p.add_argument("--wav", type=Path, action="append", default=None,
                   help="audio file to draw as a spectrogram (repeatable)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--smooth", type=int, default=SMOOTH_WINDOW,
                   help="moving-average window (rows) for the loss curve")
    p.set_defaults(func=cmd_figures)


@guarded("figures")
def cmd_figures(args: argparse.Namespace) -> int:
    if args.losslog is None and not args.wav:
        return fail("figures: give --losslog and/or --wav", EXIT_USAGE)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.losslog is not None:
        log = read_loss_log(args.losslog)
        print(write_loss_summary(log, args.out, args.smooth))
        print(loss_curve_pgm(log, args.out / "loss_curve.pgm", args.smooth))
    for wav in args.wav or []:
        print(spectrogram_pgm(read_wav(wav), args.out / f"{wav.stem}.pgm"))
    return EXIT_OK
