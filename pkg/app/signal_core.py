"""Non-learned DSP primitives: STFT, MFCC, A-weighted loudness, resampling and frame upsampling.

All functions are pure; inputs are never modified and outputs are fresh arrays.
"""
from __future__ import annotations

import warnings
from functools import lru_cache
from math import ceil, gcd

import librosa
import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sp_signal

from app.models import (
    LOUDNESS_FLOOR_DB,
    MFCC_FRAME_RATE,
    SAMPLE_RATE,
    AudioBuffer,
    FrameSeries,
    Spectrogram,
)

LOUDNESS_FFT = 2048
LOUDNESS_HOP = 64
MFCC_FFT = 1024
MFCC_HOP = 128
MFCC_MELS = 128
MFCC_FMIN = 20.0
MFCC_FMAX = 8000.0
MFCC_LOG_FLOOR = 1e-5
MFCC_COEFFS = 30
RESAMPLE_HALF_TAPS = 32


class AudioError(ValueError):
    """Audio that cannot be analysed or decoded."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@lru_cache(maxsize=32)
def hann(size: int) -> np.ndarray:
    """Periodic Hann window."""
    w = sp_signal.get_window("hann", size, fftbins=True)
    w.flags.writeable = False
    return w


def num_frames(length: int, hop: int) -> int:
    """Frames of a centred analysis: one per hop, the first centred on sample 0."""
    return ceil(length / hop)


def reflect_frame_indices(length: int, size: int, hop: int) -> np.ndarray:
    """Indices [F, size] into a signal of `length` samples for centred, reflection-padded frames.

    Frame t covers padded positions t*hop .. t*hop+size-1, where the pad is size//2 on
    each side; padded positions are folded back onto the signal by mirror reflection
    (edge sample not repeated), so pads longer than the signal are allowed.
    """
    if length < 1:
        raise AudioError("cannot frame an empty signal")
    n = num_frames(length, hop)
    pos = np.arange(n)[:, None] * hop + np.arange(size)[None, :] - size // 2
    if length == 1:
        return np.zeros_like(pos)
    period = 2 * (length - 1)
    pos = np.mod(pos, period)
    return np.where(pos >= length, period - pos, pos)


def stft_mags(samples: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Hann-windowed magnitude STFT of the last axis: [..., F, fft_size//2 + 1]."""
    idx = reflect_frame_indices(samples.shape[-1], fft_size, hop)
    frames = samples[..., idx] * hann(fft_size)
    return np.abs(sp_fft.rfft(frames, axis=-1))


def stft(audio: AudioBuffer, fft_size: int, hop: int) -> Spectrogram:
    """Hann-windowed magnitude STFT with reflection padding; ceil(len/hop) frames."""
    if len(audio) == 0:
        raise AudioError("stft of empty audio")
    if not _is_pow2(fft_size) or not 64 <= fft_size <= 2048:
        raise AudioError(f"fft_size must be a power of two in [64, 2048], got {fft_size}")
    if not 0 < hop <= fft_size:
        raise AudioError(f"hop must satisfy 0 < hop <= fft_size, got {hop}")
    return Spectrogram(mags=stft_mags(audio.samples, fft_size, hop), fft_size=fft_size, hop=hop)


# ------------------------------------------------------------------ #
# MFCC                                                                #
# ------------------------------------------------------------------ #

@lru_cache(maxsize=4)
def mel_filterbank(sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """[128 x 513] triangular mel filters spanning 20 Hz - 8 kHz."""
    with warnings.catch_warnings():
        # the lowest bands are narrower than one bin at fft 1024
        warnings.simplefilter("ignore", UserWarning)
        fb = librosa.filters.mel(
            sr=sample_rate, n_fft=MFCC_FFT, n_mels=MFCC_MELS, fmin=MFCC_FMIN, fmax=MFCC_FMAX
        )
    fb = fb.astype(np.float64)
    fb.flags.writeable = False
    return fb


def mfcc(audio: AudioBuffer) -> FrameSeries:
    """30 MFCCs at 125 Hz: fft 1024, hop 128, 128 mels, log floor 1e-5, orthonormal DCT-II."""
    if audio.sample_rate != SAMPLE_RATE:
        raise AudioError(f"mfcc expects {SAMPLE_RATE} Hz audio, got {audio.sample_rate}")
    if len(audio) < MFCC_FFT:
        raise AudioError(f"audio shorter than one {MFCC_FFT}-sample window ({len(audio)} samples)")
    mags = stft_mags(audio.samples, MFCC_FFT, MFCC_HOP)
    mel = mags @ mel_filterbank(audio.sample_rate).T
    log_mel = np.log(np.maximum(mel, MFCC_LOG_FLOOR))
    coeffs = sp_fft.dct(log_mel, type=2, norm="ortho", axis=-1)[:, :MFCC_COEFFS]
    return FrameSeries(frames=coeffs, frame_rate=MFCC_FRAME_RATE)


# ------------------------------------------------------------------ #
# Loudness                                                            #
# ------------------------------------------------------------------ #

@lru_cache(maxsize=4)
def a_weighting_power(fft_size: int = LOUDNESS_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Linear power gain of the IEC 61672 A-curve at each rFFT bin (0 at DC)."""
    freqs = np.fft.rfftfreq(fft_size, d=1.0 / sample_rate)
    gains = np.zeros_like(freqs)
    gains[1:] = 10.0 ** (librosa.A_weighting(freqs[1:], min_db=None) / 10.0)
    gains.flags.writeable = False
    return gains


def full_scale_sine_power(fft_size: int = LOUDNESS_FFT) -> float:
    """One-sided spectral power of a unit-amplitude sine under the Hann window."""
    return 0.25 * fft_size * float(np.sum(hann(fft_size) ** 2))


def frame_power_db(samples: np.ndarray, weighted: bool = True) -> np.ndarray:
    """Per-frame (A-weighted) power in dB re a full-scale sine, floored at -120 dB."""
    power = stft_mags(samples, LOUDNESS_FFT, LOUDNESS_HOP) ** 2
    if weighted:
        power = power * a_weighting_power(LOUDNESS_FFT)
    total = power.sum(axis=-1) / full_scale_sine_power(LOUDNESS_FFT)
    floor = 10.0 ** (LOUDNESS_FLOOR_DB / 10.0)
    return np.maximum(10.0 * np.log10(np.maximum(total, floor)), LOUDNESS_FLOOR_DB)


def a_weighted_loudness(audio: AudioBuffer) -> FrameSeries:
    """Dim-1 loudness series at 250 Hz (fft 2048, hop 64)."""
    if len(audio) == 0:
        raise AudioError("loudness of empty audio")
    if audio.sample_rate != SAMPLE_RATE:
        raise AudioError(f"loudness expects {SAMPLE_RATE} Hz audio, got {audio.sample_rate}")
    return FrameSeries(
        frames=frame_power_db(audio.samples),
        frame_rate=audio.sample_rate / LOUDNESS_HOP,
    )


# ------------------------------------------------------------------ #
# Frame-rate to sample-rate upsampling                                #
# ------------------------------------------------------------------ #

def bilinear_matrix(src_len: int, dst_len: int) -> np.ndarray:
    """[dst_len x src_len] linear interpolation weights; end frames sit on the end samples."""
    if src_len < 1 or dst_len < 1:
        raise ValueError(f"interpolation lengths must be positive, got {src_len} -> {dst_len}")
    if src_len == 1 or dst_len == 1:
        w = np.zeros((dst_len, src_len))
        w[:, 0] = 1.0
        return w
    pos = np.arange(dst_len) * ((src_len - 1) / (dst_len - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), src_len - 2)
    frac = pos - lo
    w = np.zeros((dst_len, src_len))
    rows = np.arange(dst_len)
    w[rows, lo] = 1.0 - frac
    w[rows, lo + 1] += frac
    return w


def upsample_bilinear(frames: FrameSeries, target_len: int) -> np.ndarray:
    """Piecewise-linear interpolation onto target_len samples.

    Frame t sits at sample t * target_len / T; samples past the last frame hold its value.
    """
    if frames.num_frames == 0:
        raise ValueError("cannot upsample an empty series")
    if target_len < 1:
        raise ValueError(f"target_len must be >= 1, got {target_len}")
    values = frames.values
    if frames.num_frames == 1:
        return np.full(target_len, values[0])
    pos = np.arange(target_len) * frames.num_frames / target_len
    return np.interp(pos, np.arange(frames.num_frames), values)


@lru_cache(maxsize=16)
def hamming_crossfade(hop: int) -> np.ndarray:
    """Weight of frame t at sample t*hop + j, j in [0, hop); frame t+1 gets one minus it.

    Periodic Hamming windows of length 2*hop centred on every frame, normalized by their
    overlap sum, reduce to this crossfade between neighbouring frames.
    """
    j = np.arange(hop)
    rising = 0.54 - 0.46 * np.cos(np.pi * j / hop)
    falling = 0.54 + 0.46 * np.cos(np.pi * j / hop)
    a = falling / (rising + falling)
    a.flags.writeable = False
    return a


def hamming_upsample_array(x: np.ndarray, hop: int) -> np.ndarray:
    """[..., T, D] -> [..., T*hop, D] Hamming overlap-add upsampling; last frame held."""
    a = hamming_crossfade(hop)[:, None]
    nxt = np.concatenate([x[..., 1:, :], x[..., -1:, :]], axis=-2)
    out = a * x[..., :, None, :] + (1.0 - a) * nxt[..., :, None, :]
    return out.reshape(*x.shape[:-2], x.shape[-2] * hop, x.shape[-1])


def smooth_upsample_hamming(frames: FrameSeries, hop: int) -> np.ndarray:
    """Spread each frame with a 2*hop Hamming window centred on it; matrix [T*hop x dim]."""
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    return hamming_upsample_array(frames.frames, hop)


# ------------------------------------------------------------------ #
# Resampling                                                          #
# ------------------------------------------------------------------ #

def resample(samples: np.ndarray, from_rate: int, to_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase windowed-sinc resampling with 64 taps per output phase."""
    if from_rate <= 0 or to_rate <= 0:
        raise AudioError(f"sample rates must be positive, got {from_rate} -> {to_rate}")
    if from_rate == to_rate:
        return np.array(samples, dtype=np.float64)
    g = gcd(int(from_rate), int(to_rate))
    up, down = int(to_rate) // g, int(from_rate) // g
    max_rate = max(up, down)
    taps = sp_signal.firwin(
        2 * RESAMPLE_HALF_TAPS * max_rate + 1, 1.0 / max_rate, window=("kaiser", 5.0)
    )
    return sp_signal.resample_poly(np.asarray(samples, dtype=np.float64), up, down, window=taps)
