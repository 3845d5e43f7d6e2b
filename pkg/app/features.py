"""Conditioning features (f0, loudness, MFCC), dataset statistics and transfer preconditioning."""
from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import librosa
import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy import fft as sp_fft

from app.models import (
    FRAME_RATE,
    LOUDNESS_FLOOR_DB,
    MFCC_FRAME_RATE,
    SAMPLE_RATE,
    AudioBuffer,
    ConditioningFeatures,
    DatasetStats,
    FrameSeries,
    PreconditionOptions,
)
from app.signal_core import (
    AudioError,
    a_weighted_loudness,
    mfcc,
    reflect_frame_indices,
)

_log = logging.getLogger("app.features")

F0_MIN_HZ = 32.70
F0_MAX_HZ = 1975.5
YIN_WINDOW = 1024
YIN_HOP = SAMPLE_RATE // FRAME_RATE
YIN_THRESHOLD = 0.1
YIN_BLOCK_FRAMES = 512
SILENCE_ENERGY = 1e-10
VOICED_CONFIDENCE = 0.5
STATS_CONFIDENCE = 0.8
LOUD_MARGIN_DB = 1.0


class FeatureError(ValueError):
    """Features that cannot be computed, loaded or combined."""


def hz_to_midi(hz: np.ndarray | float) -> np.ndarray:
    return np.asarray(librosa.hz_to_midi(hz), dtype=np.float64)


def midi_to_hz(midi: np.ndarray | float) -> np.ndarray:
    return np.asarray(librosa.midi_to_hz(midi), dtype=np.float64)


# ------------------------------------------------------------------ #
# Pitch tracking                                                      #
# ------------------------------------------------------------------ #

def _yin_lags(sample_rate: int) -> tuple[int, int, int]:
    """(min lag, max lag, integration window) for the 32.70 - 1975.5 Hz search range."""
    tau_min = int(sample_rate // F0_MAX_HZ)
    tau_max = int(np.ceil(sample_rate / F0_MIN_HZ))
    return tau_min, tau_max, YIN_WINDOW - tau_max


def _yin_block(frames: np.ndarray, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    tau_min, tau_max, width = _yin_lags(sample_rate)
    n_fft = 2 * YIN_WINDOW
    head = sp_fft.rfft(frames[:, :width], n=n_fft, axis=-1)
    full = sp_fft.rfft(frames, n=n_fft, axis=-1)
    corr = sp_fft.irfft(np.conj(head) * full, n=n_fft, axis=-1)[:, : tau_max + 1]
    energy = np.concatenate(
        [np.zeros((frames.shape[0], 1)), np.cumsum(frames * frames, axis=-1)], axis=-1
    )
    lags = np.arange(tau_max + 1)
    e_lag = energy[:, lags + width] - energy[:, lags]
    diff = np.maximum(energy[:, [width]] + e_lag - 2.0 * corr, 0.0)
    diff[:, 0] = 0.0

    # cumulative mean normalized difference
    running = np.cumsum(diff[:, 1:], axis=-1)
    cmnd = np.ones_like(diff)
    safe = np.where(running > 0, running, 1.0)
    cmnd[:, 1:] = np.where(running > 0, diff[:, 1:] * lags[1:] / safe, 1.0)

    search = cmnd[:, tau_min: tau_max + 1]
    below = search < YIN_THRESHOLD
    rising = np.ones_like(below)
    rising[:, :-1] = search[:, :-1] <= search[:, 1:]
    dip = below & rising
    pick = np.where(dip.any(axis=-1), np.argmax(dip, axis=-1), np.argmin(search, axis=-1))
    tau = pick + tau_min

    rows = np.arange(frames.shape[0])
    a = cmnd[rows, tau - 1]
    b = cmnd[rows, tau]
    c = cmnd[rows, np.minimum(tau + 1, tau_max)]
    curve = a - 2.0 * b + c
    bend = 0.5 * (a - c) / np.where(curve > 0, curve, 1.0)
    shift = np.clip(np.where((curve > 0) & (tau < tau_max), bend, 0.0), -1.0, 1.0)
    best = b - 0.25 * (a - c) * shift

    f0 = np.clip(sample_rate / (tau + shift), F0_MIN_HZ, F0_MAX_HZ)
    conf = np.clip(1.0 - best, 0.0, 1.0)
    conf[energy[:, -1] < SILENCE_ENERGY] = 0.0
    return f0, conf


def hold_unvoiced(f0: np.ndarray, confidence: np.ndarray, threshold: float = VOICED_CONFIDENCE
                  ) -> np.ndarray:
    """Frames under the voicing threshold take the previous voiced f0 (leading ones the first)."""
    voiced = confidence >= threshold
    if not voiced.any():
        return np.zeros_like(f0)
    idx = np.maximum.accumulate(np.where(voiced, np.arange(f0.size), -1))
    idx[idx < 0] = int(np.argmax(voiced))
    return f0[idx]


def track_f0(audio: AudioBuffer) -> tuple[FrameSeries, FrameSeries]:
    """YIN-style tracker: 1024-sample centred windows every 64 samples, 32.70 - 1975.5 Hz.

    Confidence is one minus the normalized difference at the chosen lag, clipped to [0, 1];
    silent frames have confidence 0.
    """
    if len(audio) == 0:
        raise AudioError("cannot track pitch of empty audio")
    idx = reflect_frame_indices(len(audio), YIN_WINDOW, YIN_HOP)
    f0 = np.empty(idx.shape[0])
    conf = np.empty(idx.shape[0])
    for start in range(0, idx.shape[0], YIN_BLOCK_FRAMES):
        stop = start + YIN_BLOCK_FRAMES
        f0[start:stop], conf[start:stop] = _yin_block(audio.samples[idx[start:stop]],
                                                      audio.sample_rate)
    rate = audio.sample_rate / YIN_HOP
    return (
        FrameSeries(frames=hold_unvoiced(f0, conf), frame_rate=rate),
        FrameSeries(frames=conf, frame_rate=rate),
    )


# ------------------------------------------------------------------ #
# Sidecar files                                                       #
# ------------------------------------------------------------------ #

def write_sidecar(path: Path, features: ConditioningFeatures) -> None:
    """`time_s f0_hz confidence loudness_db`, one line per 250 Hz frame."""
    rate = features.f0_hz.frame_rate
    lines = [
        f"{i / rate:.6f} {f:.9g} {c:.9g} {ld:.9g}"
        for i, (f, c, ld) in enumerate(zip(features.f0_hz.values, features.f0_confidence.values,
                                           features.loudness_db.values))
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_table(path: Path, columns: int) -> np.ndarray:
    try:
        table = np.loadtxt(path, ndmin=2, encoding="utf-8")
    except (OSError, ValueError) as e:
        raise FeatureError(f"cannot read feature file {path}: {e}") from e
    if table.shape[0] == 0 or table.shape[1] != columns:
        raise FeatureError(f"{path}: expected {columns} columns per line, got shape {table.shape}")
    return table


def read_sidecar(path: Path) -> ConditioningFeatures:
    table = _load_table(path, 4)
    try:
        return ConditioningFeatures(
            f0_hz=FrameSeries(frames=table[:, 1]),
            f0_confidence=FrameSeries(frames=table[:, 2]),
            loudness_db=FrameSeries(frames=table[:, 3]),
        )
    except ValidationError as e:
        raise FeatureError(f"{path}: invalid feature values: {e.errors()[0]['msg']}") from e


def write_mfcc_sidecar(path: Path, series: FrameSeries) -> None:
    lines = [" ".join(f"{v:.9g}" for v in row) for row in series.frames]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mfcc_sidecar(path: Path, columns: int = 30) -> FrameSeries:
    return FrameSeries(frames=_load_table(path, columns), frame_rate=MFCC_FRAME_RATE)


def sidecar_path(audio_path: Path) -> Path:
    return audio_path.with_suffix(".f0.txt")


def mfcc_sidecar_path(audio_path: Path) -> Path:
    return audio_path.with_suffix(".mfcc.txt")


# ------------------------------------------------------------------ #
# Extraction                                                          #
# ------------------------------------------------------------------ #

def extract_features(audio: AudioBuffer, with_mfcc: bool = False,
                     sidecar: Path | None = None) -> ConditioningFeatures:
    """f0/confidence (tracked, or from the sidecar file when it exists), loudness, optional MFCC."""
    if len(audio) == 0:
        raise AudioError("cannot extract features from empty audio")
    if sidecar is not None and sidecar.exists():
        _log.debug("using f0 and loudness from %s", sidecar)
        loaded = read_sidecar(sidecar)
        f0, conf, loudness = loaded.f0_hz, loaded.f0_confidence, loaded.loudness_db
    else:
        f0, conf = track_f0(audio)
        loudness = a_weighted_loudness(audio)
    n = min(f0.num_frames, conf.num_frames, loudness.num_frames)
    return ConditioningFeatures(
        f0_hz=f0.truncated(n),
        f0_confidence=conf.truncated(n),
        loudness_db=loudness.truncated(n),
        mfcc=mfcc(audio) if with_mfcc else None,
    )


# ------------------------------------------------------------------ #
# Statistics                                                          #
# ------------------------------------------------------------------ #

def _loudness_moments(loudness: np.ndarray) -> tuple[float, float]:
    loud = loudness[loudness > LOUDNESS_FLOOR_DB + LOUD_MARGIN_DB]
    if loud.size == 0:
        return LOUDNESS_FLOOR_DB, 0.0
    return float(loud.mean()), float(loud.std())


def compute_dataset_stats(features: Sequence[ConditioningFeatures]) -> DatasetStats:
    """Mean MIDI pitch over confident frames; loudness moments over frames above the floor."""
    if not features:
        raise FeatureError("dataset statistics need at least one example")
    f0 = np.concatenate([f.f0_hz.values for f in features])
    conf = np.concatenate([f.f0_confidence.values for f in features])
    loudness = np.concatenate([f.loudness_db.values for f in features])
    voiced = (conf > STATS_CONFIDENCE) & (f0 > 0)
    if not voiced.any():
        raise FeatureError(
            f"no voiced frames (confidence > {STATS_CONFIDENCE}) in {f0.size} frames")
    mean, std = _loudness_moments(loudness)
    return DatasetStats(
        mean_midi_pitch=float(hz_to_midi(f0[voiced]).mean()),
        mean_loudness_db=mean,
        std_loudness_db=std,
    )


def suggest_octave_shift(melody: DatasetStats, dataset: DatasetStats) -> int:
    """Whole octaves that bring the melody's mean pitch closest to the dataset's."""
    return int(round((dataset.mean_midi_pitch - melody.mean_midi_pitch) / 12.0))


# ------------------------------------------------------------------ #
# Preconditioning                                                     #
# ------------------------------------------------------------------ #

def masking_score(confidence: np.ndarray, loudness_db: np.ndarray) -> np.ndarray:
    """confidence * loudness mapped from [-120, 0] dB onto [0, 1]."""
    norm = np.clip((loudness_db - LOUDNESS_FLOOR_DB) / -LOUDNESS_FLOOR_DB, 0.0, 1.0)
    return confidence * norm


def precondition(f: ConditioningFeatures, opts: PreconditionOptions,
                 stats: DatasetStats | None = None) -> ConditioningFeatures:
    """Octave shift, autotune, loudness moment matching, loudness shift, then masking.

    Masking attenuates by `quiet` dB every frame whose masking_score is below
    mask_threshold times the clip's median score. Any loudness that was changed is clamped at
    the -120 dB floor, the lowest value loudness extraction produces. Steps that would be
    no-ops are skipped, so the default options return the features unchanged.
    """
    if opts.use_statistics and stats is None:
        raise FeatureError("use_statistics needs dataset statistics")
    f0_in = f.f0_hz.values
    loudness_in = f.loudness_db.values
    conf = f.f0_confidence.values
    f0, loudness = f0_in, loudness_in

    if opts.octave_shift:
        f0 = f0 * 2.0 ** opts.octave_shift
    if opts.autotune > 0:
        voiced = f0 > 0
        pitch = hz_to_midi(np.where(voiced, f0, 1.0))
        target = np.round(pitch)
        if opts.autotune < 1:
            target = pitch + opts.autotune * (target - pitch)
        f0 = np.where(voiced, midi_to_hz(target), f0)
    if opts.use_statistics:
        src_mean, src_std = _loudness_moments(loudness)
        loudness = (loudness - src_mean) / max(src_std, 1e-3)
        loudness = loudness * stats.std_loudness_db + stats.mean_loudness_db
    if opts.loudness_shift:
        loudness = loudness + opts.loudness_shift
    if opts.mask_threshold > 0 and opts.quiet > 0:
        score = masking_score(conf, loudness)
        quiet = score < opts.mask_threshold * np.median(score)
        loudness = np.where(quiet, loudness - opts.quiet, loudness)

    new_f0 = f.f0_hz
    if f0 is not f0_in:
        new_f0 = FrameSeries(frames=f0, frame_rate=f.f0_hz.frame_rate)
    new_loudness = f.loudness_db
    if loudness is not loudness_in:
        new_loudness = FrameSeries(frames=np.maximum(loudness, LOUDNESS_FLOOR_DB),
                                   frame_rate=f.loudness_db.frame_rate)
    return ConditioningFeatures(
        f0_hz=new_f0, f0_confidence=f.f0_confidence, loudness_db=new_loudness, mfcc=f.mfcc
    )


# ------------------------------------------------------------------ #
# Symbolic melodies                                                   #
# ------------------------------------------------------------------ #

class Note(BaseModel):
    start_s: float = Field(ge=0)
    end_s: float
    midi: float

    @model_validator(mode="after")
    def _check(self) -> Note:
        if self.end_s <= self.start_s:
            raise ValueError(f"note ends ({self.end_s}) before it starts ({self.start_s})")
        return self


def parse_notes(path: Path) -> list[Note]:
    """`start_s end_s midi` per line; `#` starts a comment."""
    notes: list[Note] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError(f"expected 3 fields, got {len(parts)}")
            notes.append(Note(start_s=float(parts[0]), end_s=float(parts[1]), midi=float(parts[2])))
        except ValueError as e:
            raise FeatureError(f"{path}:{lineno}: {e}") from e
    return notes


def f0_from_notes(notes: Sequence[Note], num_frames: int, frame_rate: float = FRAME_RATE,
                  vibrato_cents: float = 0.0, vibrato_hz: float = 5.5
                  ) -> tuple[FrameSeries, FrameSeries]:
    """f0 and confidence for a note list; gaps hold the previous note's pitch at confidence 0."""
    if not notes:
        raise FeatureError("a melody needs at least one note")
    t = np.arange(num_frames) / frame_rate
    f0 = np.zeros(num_frames)
    conf = np.zeros(num_frames)
    for note in sorted(notes, key=lambda n: n.start_s):
        inside = (t >= note.start_s) & (t < note.end_s)
        cents = vibrato_cents * np.sin(2 * np.pi * vibrato_hz * (t[inside] - note.start_s))
        f0[inside] = midi_to_hz(note.midi + cents / 100.0)
        conf[inside] = 1.0
    if not conf.any():
        raise FeatureError(f"no note overlaps the {num_frames / frame_rate:.2f} s clip")
    return (
        FrameSeries(frames=hold_unvoiced(f0, conf), frame_rate=frame_rate),
        FrameSeries(frames=conf, frame_rate=frame_rate),
    )
