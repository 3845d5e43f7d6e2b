"""train: resolve a run config, load or chunk the data, and optimize the model."""
from __future__ import annotations

import argparse
from pathlib import Path

from app.commands import EXIT_OK, EXIT_USAGE, fail, guarded
from app.conffile import load_train_config, write_resolved
from app.store import load_checkpoint
from app.trainer import CHECKPOINT_FILE, TrainingDiverged, open_dataset, train


def register(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser(
        "train", help="train a decoder on a dataset",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--config", type=Path, required=True, help="run config file (key = value)")
    p.add_argument("--data", type=Path, required=True,
                   help="prepared dataset directory, or a directory of recordings")
    p.add_argument("--out", type=Path, required=True,
                   help="run directory for model.ckpt, loss.csv and train.log")
    p.add_argument("--resume", action="store_true",
                   help="continue from the run directory's model.ckpt")
    p.set_defaults(func=cmd_train)


@guarded("train")
def cmd_train(args: argparse.Namespace) -> int:
    if not args.data.is_dir():
        return fail(f"train: data directory {args.data} does not exist", EXIT_USAGE)
    config, _ = load_train_config(args.config)
    write_resolved(config, args.out)
    resume = None
    if args.resume:
        ckpt_path = args.out / CHECKPOINT_FILE
        if not ckpt_path.exists():
            return fail(f"train: --resume given but {ckpt_path} does not exist")
        resume = load_checkpoint(ckpt_path, config.model)
    dataset = open_dataset(args.data, config.example_seconds, with_mfcc=config.model.use_z)
    try:
        ckpt = train(config, dataset, args.out, resume=resume)
    except TrainingDiverged as e:
        return fail(f"train: {e}")
    print(f"trained to step {ckpt.step} -> {args.out / CHECKPOINT_FILE}")
    return EXIT_OK
