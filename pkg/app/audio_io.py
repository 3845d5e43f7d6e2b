"""WAV read/write: PCM-16 or float-32 in, mono at 16 kHz; float-32 out."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import soundfile as sf

from app.models import SAMPLE_RATE, AudioBuffer
from app.signal_core import AudioError, resample

_log = logging.getLogger("app.audio_io")

AUDIO_SUFFIXES = (".wav", ".flac", ".aif", ".aiff", ".ogg")


def read_wav(path: Path) -> AudioBuffer:
    """Decode an audio file to mono 16 kHz."""
    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (RuntimeError, sf.LibsndfileError) as e:
        raise AudioError(f"cannot decode {path}: {e}") from e
    mono = data.mean(axis=1)
    if rate != SAMPLE_RATE:
        _log.debug("resampling %s from %d Hz", path, rate)
        mono = resample(mono, rate, SAMPLE_RATE)
    mono = np.nan_to_num(mono, nan=0.0, posinf=1.0, neginf=-1.0)
    return AudioBuffer(samples=np.clip(mono, -1.0, 1.0), sample_rate=SAMPLE_RATE)


def write_wav(path: Path, audio: AudioBuffer) -> None:
    """Write mono float-32 at the buffer's rate."""
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), audio.samples.astype(np.float32), audio.sample_rate, subtype="FLOAT")


def list_audio_files(directory: Path) -> list[Path]:
    """Audio files directly inside directory, sorted by name."""
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in AUDIO_SUFFIXES
    )
