"""Synthetic "voice" for desk-scale overfitting: known-f0 sawtooth glide, vibrato, noise."""
from __future__ import annotations

import numpy as np
from scipy.signal.windows import hann as hann_window

from app.models import FRAME_RATE, SAMPLE_RATE, AudioBuffer, FrameSeries

GLIDE_LOW_HZ = 110.0
GLIDE_HIGH_HZ = 330.0
GLIDE_PERIOD_S = 6.0
VIBRATO_HZ = 5.0
VIBRATO_DEPTH = 0.3
BURST_EVERY_S = 1.5
BURST_LENGTH_S = 0.08
BURST_LEVEL = 0.1
PEAK = 0.8


def glide_f0(num_samples: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Per-sample f0 sweeping geometrically 110 -> 330 -> 110 Hz every GLIDE_PERIOD_S."""
    t = np.arange(num_samples) / sample_rate
    position = 0.5 - 0.5 * np.cos(2.0 * np.pi * t / GLIDE_PERIOD_S)
    return GLIDE_LOW_HZ * (GLIDE_HIGH_HZ / GLIDE_LOW_HZ) ** position


def band_limited_saw(f0: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Sum of k-th harmonics at 1/k, each dropped wherever k*f0 reaches Nyquist."""
    phase = 2.0 * np.pi * np.concatenate([[0.0], np.cumsum(f0[:-1])]) / sample_rate
    out = np.zeros_like(f0)
    k = 1
    while k * f0.min() < sample_rate / 2:
        out += np.where(k * f0 < sample_rate / 2, np.sin(k * phase) / k, 0.0)
        k += 1
    return out


def synthetic_voice(seconds: float = 30.0, seed: int = 0,
                    sample_rate: int = SAMPLE_RATE) -> tuple[AudioBuffer, FrameSeries]:
    """Audio and its true 250 Hz f0 track.

    Amplitude vibrato modulates the tone; short Hann-shaped white-noise bursts recur every
    BURST_EVERY_S with a random offset. Peak-normalized to PEAK.
    """
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    f0 = glide_f0(n, sample_rate)
    t = np.arange(n) / sample_rate
    vibrato = 1.0 + VIBRATO_DEPTH * np.sin(2 * np.pi * VIBRATO_HZ * t)
    tone = band_limited_saw(f0, sample_rate) * vibrato

    burst_len = int(BURST_LENGTH_S * sample_rate)
    envelope = hann_window(burst_len, sym=False)
    every = int(BURST_EVERY_S * sample_rate)
    for start in range(0, n - burst_len, every):
        at = start + int(rng.integers(0, max(1, every - burst_len)))
        if at + burst_len > n:
            break
        tone[at: at + burst_len] += BURST_LEVEL * envelope * rng.uniform(-1.0, 1.0, burst_len)

    peak = float(np.max(np.abs(tone))) or 1.0
    samples = tone * (PEAK / peak)
    hop = sample_rate // FRAME_RATE
    frames = f0[::hop][: n // hop]
    return (AudioBuffer(samples=samples, sample_rate=sample_rate),
            FrameSeries(frames=frames, frame_rate=FRAME_RATE))
