"""Figure artifacts: smoothed loss summaries and greymap (PGM) spectrogram / loss-curve images."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict
from scipy.ndimage import uniform_filter1d

from app.models import AudioBuffer
from app.signal_core import hann, stft

_log = logging.getLogger("app.figures")

SPECTROGRAM_FFT = 2048
SPECTROGRAM_HOP = 256
DYNAMIC_RANGE_DB = 80.0
SMOOTH_WINDOW = 10
CURVE_SIZE = (640, 360)


class LossLog(BaseModel):
    """Columns of a loss.csv written by the trainer."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    header: list[str]
    rows: np.ndarray

    @property
    def steps(self) -> np.ndarray:
        return self.rows[:, 0].astype(np.int64)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.header.index(name)]


def read_loss_log(path: Path) -> LossLog:
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:2] != ["step", "total"]:
            raise ValueError(f"{path}: not a loss log (header {header!r})")
        rows = [[float(x) for x in r] for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: loss log has no rows")
    return LossLog(header=header, rows=np.array(rows, dtype=np.float64))


def smooth(values: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centred moving average, edges padded with the nearest value."""
    return uniform_filter1d(values, size=max(1, min(window, len(values))), mode="nearest")


def write_loss_summary(log: LossLog, out_dir: Path, window: int = SMOOTH_WINDOW) -> Path:
    """loss_summary.csv: step, raw total, smoothed total, then each smoothed per-FFT term."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "loss_summary.csv"
    terms = log.header[2:]
    columns = [smooth(log.column("total"), window)] + [smooth(log.column(t), window) for t in terms]
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "total", "smoothed"] + [f"smoothed_{t}" for t in terms])
        for i, step in enumerate(log.steps):
            writer.writerow([int(step), repr(float(log.column("total")[i]))]
                            + [repr(float(c[i])) for c in columns])
    return path


def loss_curve_pgm(log: LossLog, path: Path, window: int = SMOOTH_WINDOW) -> Path:
    """Raw (grey) and smoothed (white) total loss on a log scale against step."""
    w, h = CURVE_SIZE
    img = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(img)
    total = np.maximum(log.column("total"), 1e-12)
    logs = np.log10(total)
    lo, hi = float(logs.min()), float(logs.max())
    span = hi - lo or 1.0
    steps = log.steps
    s_lo, s_span = int(steps[0]), max(1, int(steps[-1] - steps[0]))

    def points(values: np.ndarray) -> list[tuple[float, float]]:
        xs = (steps - s_lo) / s_span * (w - 1)
        ys = (1.0 - (values - lo) / span) * (h - 1)
        return list(zip(xs.tolist(), ys.tolist()))

    if len(steps) > 1:
        draw.line(points(logs), fill=110)
        draw.line(points(np.log10(np.maximum(smooth(total, window), 1e-12))), fill=255, width=2)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PPM")
    return path


def spectrogram_image(audio: AudioBuffer, fft_size: int = SPECTROGRAM_FFT,
                      hop: int = SPECTROGRAM_HOP) -> np.ndarray:
    """uint8 [bins x frames], low frequencies at the bottom.

    0 dB is the peak bin of a full-scale sine; the top 80 dB map linearly onto 0..255.
    """
    mags = stft(audio, fft_size, hop).mags
    reference = float(np.sum(hann(fft_size))) / 2.0
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mags / reference)
    level = np.clip((db + DYNAMIC_RANGE_DB) / DYNAMIC_RANGE_DB, 0.0, 1.0)
    return np.round(level.T[::-1] * 255.0).astype(np.uint8)


def spectrogram_pgm(audio: AudioBuffer, path: Path, fft_size: int = SPECTROGRAM_FFT,
                    hop: int = SPECTROGRAM_HOP) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(spectrogram_image(audio, fft_size, hop)).save(path, format="PPM")
    _log.debug("wrote %s", path)
    return path
