"""run: timbre transfer of a recording (or a note list) through a trained checkpoint."""
from __future__ import annotations

import argparse
import csv
from pathlib import Path

from app.applog import append_app_log
from app.audio_io import read_wav, write_wav
from app.commands import EXIT_OK, EXIT_USAGE, fail, guarded
from app.decoder import REVERB_PARAM, decode
from app.features import (
    compute_dataset_stats,
    extract_features,
    f0_from_notes,
    parse_notes,
    precondition,
    sidecar_path,
    suggest_octave_shift,
)
from app.models import AudioBuffer, ConditioningFeatures, PreconditionOptions
from app.store import load_checkpoint
from app.synth import ReverbParams, render_stems


def register(subparsers: argparse._SubParsersAction) -> None:
    d = PreconditionOptions.transfer_defaults()
    p = subparsers.add_parser(
        "run", help="render an input melody through a trained model",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--checkpoint", type=Path, required=True, help="model.ckpt from a training run")
    p.add_argument("--input", type=Path, required=True, help="input recording")
    p.add_argument("--out", type=Path, required=True, help="output WAV")
    p.add_argument("--octave-shift", type=int, default=d.octave_shift,
                   help="transpose f0 by whole octaves")
    p.add_argument("--auto-octave", action="store_true",
                   help="pick the octave shift that best matches the training data's pitch")
    p.add_argument("--loudness-shift", type=float, default=d.loudness_shift,
                   help="dB added to the loudness curve")
    p.add_argument("--mask-threshold", type=float, default=d.mask_threshold,
                   help="attenuate frames scoring below this fraction of the median score")
    p.add_argument("--quiet", type=float, default=d.quiet, help="attenuation (dB) of masked frames")
    p.add_argument("--autotune", type=float, default=d.autotune,
                   help="pull f0 toward the nearest semitone (0 = off, 1 = fully quantized)")
    p.add_argument("--use-statistics", action=argparse.BooleanOptionalAction,
                   default=d.use_statistics,
                   help="match loudness mean/std to the training data")
    p.add_argument("--notes", type=Path, default=None,
                   help="`start_s end_s midi` note list replacing the tracked f0")
    p.add_argument("--vibrato-cents", type=float, default=0.0,
                   help="vibrato depth applied to --notes melodies")
    p.add_argument("--stems", action="store_true",
                   help="also write <out>.harmonic.wav and <out>.noise.wav")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.set_defaults(func=cmd_run)


def write_feature_csv(path: Path, f: ConditioningFeatures) -> None:
    """The conditioning actually fed to the decoder, one row per frame."""
    rate = f.f0_hz.frame_rate
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "f0_hz", "confidence", "loudness_db"])
        for i, (f0, conf, loud) in enumerate(zip(f.f0_hz.values, f.f0_confidence.values,
                                                 f.loudness_db.values)):
            writer.writerow([f"{i / rate:.6f}", f"{f0:.9g}", f"{conf:.9g}", f"{loud:.9g}"])


@guarded("run")
def cmd_run(args: argparse.Namespace) -> int:
    if not args.input.is_file():
        return fail(f"run: input {args.input} does not exist", EXIT_USAGE)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.config.model
    audio = read_wav(args.input)
    f = extract_features(audio, with_mfcc=model.use_z, sidecar=sidecar_path(args.input))
    if args.notes is not None:
        f0, conf = f0_from_notes(parse_notes(args.notes), f.num_frames,
                                 vibrato_cents=args.vibrato_cents)
        f = ConditioningFeatures(f0_hz=f0, f0_confidence=conf, loudness_db=f.loudness_db,
                                 mfcc=f.mfcc)

    octave = args.octave_shift
    if args.auto_octave:
        if ckpt.stats is None:
            return fail("run: --auto-octave needs dataset statistics in the checkpoint")
        octave = suggest_octave_shift(compute_dataset_stats([f]), ckpt.stats)
        append_app_log(f"auto octave shift: {octave:+d}")
    if args.use_statistics and ckpt.stats is None:
        return fail("run: checkpoint has no dataset statistics; pass --no-use-statistics")
    opts = PreconditionOptions(
        use_statistics=args.use_statistics,
        mask_threshold=args.mask_threshold,
        quiet=args.quiet,
        autotune=args.autotune,
        octave_shift=octave,
        loudness_shift=args.loudness_shift,
    )
    conditioned = precondition(f, opts, ckpt.stats)
    controls = decode(conditioned, ckpt.params, model)
    reverb = ReverbParams(impulse_response=ckpt.params[REVERB_PARAM]) if model.use_reverb else None
    stems = render_stems(controls, reverb, seed=args.seed)

    def trimmed(buf: AudioBuffer) -> AudioBuffer:
        return AudioBuffer(samples=buf.samples[: len(audio)], sample_rate=buf.sample_rate)

    write_wav(args.out, trimmed(stems.mix))
    write_feature_csv(args.out.with_suffix(".csv"), conditioned)
    if args.stems:
        write_wav(args.out.with_suffix(".harmonic.wav"), trimmed(stems.harmonic))
        write_wav(args.out.with_suffix(".noise.wav"), trimmed(stems.noise))
    append_app_log(f"rendered {args.input.name} -> {args.out} ({audio.duration:.2f}s)")
    print(f"{args.out} ({len(audio)} samples)")
    return EXIT_OK
