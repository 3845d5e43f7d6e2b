#!/usr/bin/env python3
"""Write the synthetic training voice (known f0 glide) as a WAV, optionally with its true f0."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from app.audio_io import write_wav  # noqa: E402
from app.synthetic import synthetic_voice  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--out", type=Path, required=True, help="output WAV")
    parser.add_argument("--seconds", type=float, default=30.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--f0", type=Path, default=None,
                        help="also write the true f0 track, one Hz value per 250 Hz frame")
    args = parser.parse_args()
    audio, f0 = synthetic_voice(args.seconds, args.seed)
    write_wav(args.out, audio)
    if args.f0 is not None:
        args.f0.write_text("\n".join(f"{v:.6f}" for v in f0.values) + "\n", encoding="utf-8")
    print(f"{args.out}: {audio.duration:.2f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
