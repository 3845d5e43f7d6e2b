"""Differentiable harmonic and filtered-noise synthesis, trainable reverb, spectral loss.

Each stage has a tensor form (used by training, operating on [batch, ...] tensors on a Tape)
and an AudioBuffer form for one example, which runs the same tensor code on a 64-bit tape.
"""
from __future__ import annotations

import logging
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import fft as sp_fft

from app import autodiff as ad
from app.autodiff import ShapeError, Tape, Tensor
from app.models import FRAME_RATE, SAMPLE_RATE, AudioBuffer, FrameSeries, _frozen_array
from app.signal_core import (
    bilinear_matrix,
    hamming_crossfade,
    hamming_upsample_array,
    hann,
    stft_mags,
    upsample_bilinear,
)

_log = logging.getLogger("app.synth")

NOISE_FFT = 128
NOISE_HOP = 64
NOISE_BINS = NOISE_FFT // 2 + 1
LOSS_FFT_SIZES = (2048, 1024, 512, 256, 128, 64)
LOG_EPS = 1e-7
REVERB_INIT_SCALE = 5e-3
REVERB_INIT_DECAY_S = 0.2
BANK_BLOCK_FRAMES = 250


class SynthControls(BaseModel):
    """Per-frame synthesizer inputs: A(n), c_k(n), H_l(n) and f0, all at the same frame rate."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    amplitude: FrameSeries
    harm_distribution: FrameSeries
    noise_magnitudes: FrameSeries
    f0_hz: FrameSeries

    @model_validator(mode="after")
    def _check(self) -> SynthControls:
        n = self.f0_hz.num_frames
        for name in ("amplitude", "harm_distribution", "noise_magnitudes"):
            series: FrameSeries = getattr(self, name)
            if series.num_frames != n:
                raise ValueError(f"{name} has {series.num_frames} frames, f0 has {n}")
            if np.any(series.frames < 0):
                raise ValueError(f"{name} must be non-negative")
        if self.amplitude.dim != 1 or self.f0_hz.dim != 1:
            raise ValueError("amplitude and f0 must have dim 1")
        if self.noise_magnitudes.dim < 2:
            raise ValueError("noise_magnitudes needs at least 2 bins")
        if np.any(self.f0_hz.frames < 0):
            raise ValueError("f0 must be non-negative")
        return self

    @property
    def num_frames(self) -> int:
        return self.f0_hz.num_frames

    @property
    def num_values(self) -> int:
        """Control values consumed by the synthesizers (f0 excluded, it comes from the input)."""
        return self.num_frames * (
            self.amplitude.dim + self.harm_distribution.dim + self.noise_magnitudes.dim
        )

    @classmethod
    def silent(cls, num_frames: int, f0_hz: float = 440.0, n_harmonics: int = 60,
               n_noise: int = 65) -> SynthControls:
        return cls(
            amplitude=FrameSeries(frames=np.zeros((num_frames, 1))),
            harm_distribution=FrameSeries(frames=np.zeros((num_frames, n_harmonics))),
            noise_magnitudes=FrameSeries(frames=np.zeros((num_frames, n_noise))),
            f0_hz=FrameSeries(frames=np.full((num_frames, 1), f0_hz)),
        )


class ReverbParams(BaseModel):
    """Trainable impulse response; tap 0 never reaches the wet path."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    impulse_response: np.ndarray

    @field_validator("impulse_response", mode="before")
    @classmethod
    def _check_ir(cls, v: Any) -> np.ndarray:
        return _frozen_array(v, ndim=1)

    @classmethod
    def initial(cls, length: int = SAMPLE_RATE, rng: np.random.Generator | None = None
                ) -> ReverbParams:
        """Small uniform noise under an exponential decay."""
        return cls(impulse_response=initial_impulse_response(length, rng))


def initial_impulse_response(length: int, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng or np.random.default_rng(0)
    decay = np.exp(-np.arange(length) / (REVERB_INIT_DECAY_S * SAMPLE_RATE))
    return rng.uniform(-1.0, 1.0, length) * REVERB_INIT_SCALE * decay


class LossReport(BaseModel):
    """Multi-scale spectral loss: per-FFT-size terms and their sum."""
    total: float
    per_fft: dict[int, float]

    @model_validator(mode="after")
    def _check(self) -> LossReport:
        if any(v < 0 for v in self.per_fft.values()) or self.total < 0:
            raise ValueError("loss terms must be non-negative")
        return self

    @classmethod
    def from_terms(cls, per_fft: dict[int, float]) -> LossReport:
        return cls(total=float(sum(per_fft.values())), per_fft=per_fft)


class RenderedStems(BaseModel):
    """Harmonic and noise signals before mixing, and the (reverberated) mix."""
    harmonic: AudioBuffer
    noise: AudioBuffer
    mix: AudioBuffer


def frame_hop(sample_rate: int) -> int:
    if sample_rate % FRAME_RATE:
        raise ValueError(f"sample rate {sample_rate} is not a multiple of {FRAME_RATE} Hz")
    return sample_rate // FRAME_RATE


def _check_noise_rate(sample_rate: int) -> None:
    """The noise filter works on fixed 64-sample hops, one per frame at 16 kHz."""
    if frame_hop(sample_rate) != NOISE_HOP:
        raise ValueError(
            f"filtered noise needs {NOISE_HOP * FRAME_RATE} Hz audio, got {sample_rate} Hz"
        )


# ------------------------------------------------------------------ #
# Harmonic synthesizer                                                #
# ------------------------------------------------------------------ #

def _hamming_adjoint(g: np.ndarray, hop: int) -> np.ndarray:
    """Transpose of hamming_upsample_array: [..., T*hop, D] -> [..., T, D]."""
    *lead, n, d = g.shape
    gr = g.reshape(*lead, n // hop, hop, d)
    a = hamming_crossfade(hop)[:, None].astype(g.dtype)
    to_self = (a * gr).sum(axis=-2)
    to_next = ((1.0 - a) * gr).sum(axis=-2)
    out = to_self
    out[..., 1:, :] += to_next[..., :-1, :]
    out[..., -1, :] += to_next[..., -1, :]
    return out


def hamming_upsample(a: Tensor, hop: int) -> Tensor:
    """[..., T, D] -> [..., T*hop, D]; see smooth_upsample_hamming."""
    return a.tape.record("hamming_upsample", hamming_upsample_array(a.value, hop), (a,),
                         lambda g: (_hamming_adjoint(g, hop),))


def nyquist_normalize(harm: Tensor, f0_hz: np.ndarray, sample_rate: int) -> Tensor:
    """Zero c_k where k*f0 reaches Nyquist, then renormalize each frame to sum 1."""
    k = np.arange(1, harm.shape[-1] + 1)
    live = (f0_hz[..., None] * k) < sample_rate / 2
    masked = ad.mul(harm, live.astype(harm.value.dtype))
    total = ad.reduce_sum(masked, axis=-1, keepdims=True)
    # frames with every harmonic masked divide by 1 and stay silent
    total = ad.add(total, (total.value == 0).astype(total.value.dtype))
    return ad.div(masked, ad.broadcast_to(total, masked.shape))


def harmonic_phases(f0_frames: np.ndarray, hop: int, sample_rate: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample f0 and running cycle count sum_{m<n} f0(m)/sample_rate for one f0 track."""
    f0_up = upsample_bilinear(FrameSeries(frames=f0_frames), f0_frames.shape[0] * hop)
    cycles = np.concatenate([[0.0], np.cumsum(f0_up[:-1])]) / sample_rate
    return f0_up, cycles


def harmonic_basis(f0_up: np.ndarray, cycles: np.ndarray, n_harmonics: int, sample_rate: int
                   ) -> np.ndarray:
    """[len, K] masked sinusoids sin(phi_k(n)) for a span of per-sample f0 and cycle counts.

    phi_k(n) = 2*pi*k*cycles(n), so phi(0) = 0 at the start of the track. Harmonics at or above
    Nyquist at a given sample are zero there.
    """
    k = np.arange(1, n_harmonics + 1)
    basis = np.sin(2 * np.pi * np.mod(np.outer(cycles, k), 1.0))
    basis[np.outer(f0_up, k) >= sample_rate / 2] = 0.0
    return basis


def _frame_blocks(n_frames: int) -> list[tuple[int, int]]:
    return [(t0, min(t0 + BANK_BLOCK_FRAMES, n_frames))
            for t0 in range(0, n_frames, BANK_BLOCK_FRAMES)]


def harmonic_bank(dist: Tensor, f0_hz: np.ndarray, hop: int, sample_rate: int) -> Tensor:
    """sum_k c_k(n) sin(phi_k(n)) for [B, T, K] distributions -> [B, T*hop].

    Sinusoids are built BANK_BLOCK_FRAMES frames at a time from the track's running phase, and
    rebuilt in the pullback, so memory stays at one [BANK_BLOCK_FRAMES*hop, K] block.
    """
    c = dist.value
    batch, n_frames, n_harm = c.shape
    if f0_hz.shape != (batch, n_frames):
        raise ShapeError(f"harmonic_bank: f0 shape {f0_hz.shape} vs distribution {c.shape}")
    blocks = _frame_blocks(n_frames)
    out = np.empty((batch, n_frames * hop), c.dtype)
    for b in range(batch):
        f0_up, cycles = harmonic_phases(f0_hz[b], hop, sample_rate)
        for t0, t1 in blocks:
            s0, s1 = t0 * hop, t1 * hop
            basis = harmonic_basis(f0_up[s0:s1], cycles[s0:s1], n_harm, sample_rate)
            # one frame past the block so its last crossfade reaches the next frame
            c_up = hamming_upsample_array(c[b, t0:t1 + 1], hop)[: s1 - s0]
            out[b, s0:s1] = (c_up * basis).sum(axis=-1)

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        a = hamming_crossfade(hop)[:, None].astype(g.dtype)
        dc = np.zeros(c.shape, g.dtype)
        for b in range(batch):
            f0_up, cycles = harmonic_phases(f0_hz[b], hop, sample_rate)
            for t0, t1 in blocks:
                s0, s1 = t0 * hop, t1 * hop
                basis = harmonic_basis(f0_up[s0:s1], cycles[s0:s1], n_harm, sample_rate)
                gr = (g[b, s0:s1, None] * basis).reshape(t1 - t0, hop, n_harm)
                dc[b, t0:t1] += (a * gr).sum(axis=1)
                to_next = ((1.0 - a) * gr).sum(axis=1)
                dc[b, t0 + 1:t1 + 1] += to_next[: min(t1 + 1, n_frames) - t0 - 1]
                if t1 == n_frames:
                    dc[b, -1] += to_next[-1]
        return (dc,)

    return dist.tape.record("harmonic_bank", out, (dist,), pullback)


def harmonic_synth_batch(amplitude: Tensor, harm: Tensor, f0_hz: np.ndarray,
                         sample_rate: int = SAMPLE_RATE) -> Tensor:
    """x(n) = A(n) * sum_k c_k(n) sin(phi_k(n)) for [B, T, 1] / [B, T, K] controls."""
    hop = frame_hop(sample_rate)
    batch, n_frames, _ = harm.shape
    dist = nyquist_normalize(harm, f0_hz, sample_rate)
    bank = harmonic_bank(dist, f0_hz, hop, sample_rate)
    amp = ad.reshape(hamming_upsample(amplitude, hop), (batch, n_frames * hop))
    return ad.mul(amp, bank)


# ------------------------------------------------------------------ #
# Filtered noise                                                      #
# ------------------------------------------------------------------ #

def white_noise(shape: tuple[int, ...], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, shape)


def noise_filter(mags: Tensor, noise: np.ndarray) -> Tensor:
    """Filter hop-length noise blocks by per-frame zero-phase FIRs built from 65 magnitudes.

    Each frame's magnitudes go through an inverse rFFT, are centred and Hann-windowed to 128
    taps, convolved with that frame's 64 noise samples and overlap-added. The 64-sample
    centring delay is removed, so flat unit magnitudes return the noise unchanged.
    """
    h = mags.value
    batch, n_frames, bins = h.shape
    if bins != NOISE_BINS:
        raise ShapeError(f"noise_filter: expected {NOISE_BINS} bins, got {bins}")
    if noise.shape != (batch, n_frames * NOISE_HOP):
        raise ShapeError(f"noise_filter: noise shape {noise.shape} vs magnitudes {h.shape}")
    n_conv = 2 * NOISE_FFT
    win = hann(NOISE_FFT).astype(h.dtype)
    ir = np.roll(sp_fft.irfft(h, n=NOISE_FFT, axis=-1), NOISE_FFT // 2, axis=-1) * win
    blocks = sp_fft.rfft(noise.reshape(batch, n_frames, NOISE_HOP), n=n_conv, axis=-1)
    filtered = sp_fft.irfft(blocks * sp_fft.rfft(ir, n=n_conv, axis=-1), n=n_conv, axis=-1)
    full = ad.overlap_add_array(filtered, NOISE_HOP)
    delay = NOISE_FFT // 2
    out = full[:, delay: delay + n_frames * NOISE_HOP]
    span = ad.overlap_indices(n_frames, n_conv, NOISE_HOP)
    scale = np.full(NOISE_BINS, 2.0 / NOISE_FFT)
    scale[[0, -1]] = 1.0 / NOISE_FFT

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        gfull = np.zeros(full.shape, g.dtype)
        gfull[:, delay: delay + n_frames * NOISE_HOP] = g
        gy = sp_fft.rfft(gfull[:, span], n=n_conv, axis=-1)
        d_ir = sp_fft.irfft(gy * np.conj(blocks), n=n_conv, axis=-1)[..., :NOISE_FFT]
        d_raw = np.roll(d_ir * win, -(NOISE_FFT // 2), axis=-1)
        return (sp_fft.rfft(d_raw, axis=-1).real * scale,)

    return mags.tape.record("noise_filter", out, (mags,), pullback)


def filtered_noise_batch(mags: Tensor, noise: np.ndarray) -> Tensor:
    """[B, T, N] magnitudes, linearly interpolated to 65 bins when N differs."""
    if mags.shape[-1] != NOISE_BINS:
        interp = bilinear_matrix(mags.shape[-1], NOISE_BINS).T
        mags = ad.matmul(mags, interp)
    return noise_filter(mags, noise)


# ------------------------------------------------------------------ #
# Reverb                                                              #
# ------------------------------------------------------------------ #

def fft_convolve(x: Tensor, ir: Tensor) -> Tensor:
    """Linear convolution of [..., L] signals with one [R] response, truncated to L."""
    if ir.ndim != 1:
        raise ShapeError(f"fft_convolve: impulse response must be 1-d, got {ir.shape}")
    length, taps = x.shape[-1], ir.shape[0]
    n = sp_fft.next_fast_len(length + taps - 1, real=True)
    xs = sp_fft.rfft(x.value, n=n, axis=-1)
    hs = sp_fft.rfft(ir.value, n=n)
    y = sp_fft.irfft(xs * hs, n=n, axis=-1)[..., :length]

    def pullback(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gs = sp_fft.rfft(g, n=n, axis=-1)
        dx = sp_fft.irfft(gs * np.conj(hs), n=n, axis=-1)[..., :length]
        dh = sp_fft.irfft(gs * np.conj(xs), n=n, axis=-1)[..., :taps]
        return dx, dh.reshape(-1, taps).sum(axis=0)

    return x.tape.record("fft_convolve", y, (x, ir), pullback)


def reverb_batch(dry: Tensor, ir: Tensor) -> Tensor:
    """dry + dry * ir[1:] (convolution), same length as dry."""
    wet_taps = np.ones(ir.shape[0])
    wet_taps[0] = 0.0
    return ad.add(dry, fft_convolve(dry, ad.mul(ir, wet_taps)))


# ------------------------------------------------------------------ #
# Loss                                                                #
# ------------------------------------------------------------------ #

def spectral_loss_batch(target: np.ndarray, prediction: Tensor,
                        fft_sizes: tuple[int, ...] = LOSS_FFT_SIZES
                        ) -> tuple[Tensor, dict[int, Tensor]]:
    """Sum over FFT sizes of mean |S - S^| + mean |log(S + 1e-7) - log(S^ + 1e-7)|, hop = fft/4."""
    if target.shape != prediction.shape:
        raise ShapeError(
            f"spectral loss: target shape {target.shape} vs prediction {prediction.shape}"
        )
    per_fft: dict[int, Tensor] = {}
    for size in fft_sizes:
        hop = size // 4
        ref = stft_mags(target, size, hop)
        est = ad.fft_real_mag(ad.mul(ad.frame(prediction, size, hop), hann(size)))
        lin = ad.reduce_mean(ad.absolute(ad.sub(est, ref)))
        logs = ad.reduce_mean(ad.absolute(ad.sub(ad.log(ad.add(est, LOG_EPS)),
                                                 np.log(ref + LOG_EPS))))
        per_fft[size] = ad.add(lin, logs)
    total = per_fft[fft_sizes[0]]
    for size in fft_sizes[1:]:
        total = ad.add(total, per_fft[size])
    return total, per_fft


# ------------------------------------------------------------------ #
# Full render                                                         #
# ------------------------------------------------------------------ #

def render_batch(amplitude: Tensor, harm: Tensor, noise_mags: Tensor, f0_hz: np.ndarray,
                 noise: np.ndarray, ir: Tensor | None = None,
                 sample_rate: int = SAMPLE_RATE) -> tuple[Tensor, Tensor, Tensor]:
    """(mix, harmonic, noise) for a batch; reverb is applied to the mix only."""
    harmonic = harmonic_synth_batch(amplitude, harm, f0_hz, sample_rate)
    noisy = filtered_noise_batch(noise_mags, noise)
    mix = ad.add(harmonic, noisy)
    if ir is not None:
        mix = reverb_batch(mix, ir)
    return mix, harmonic, noisy


def _tape() -> Tape:
    return Tape(np.float64)


def _row(tape: Tape, series: FrameSeries) -> Tensor:
    return tape.constant(series.frames[None])


def _buffer(t: Tensor, sample_rate: int) -> AudioBuffer:
    return AudioBuffer(samples=t.value[0], sample_rate=sample_rate)


def harmonic_synth(controls: SynthControls, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    tape = _tape()
    out = harmonic_synth_batch(_row(tape, controls.amplitude),
                               _row(tape, controls.harm_distribution),
                               controls.f0_hz.frames.T, sample_rate)
    return _buffer(out, sample_rate)


def filtered_noise(noise_magnitudes: FrameSeries, sample_rate: int = SAMPLE_RATE,
                   seed: int = 0) -> AudioBuffer:
    if noise_magnitudes.dim < 2:
        raise ValueError("noise_magnitudes needs at least 2 bins")
    if np.any(noise_magnitudes.frames < 0):
        raise ValueError("noise magnitudes must be non-negative")
    _check_noise_rate(sample_rate)
    tape = _tape()
    noise = white_noise((1, noise_magnitudes.num_frames * NOISE_HOP), seed)
    return _buffer(filtered_noise_batch(_row(tape, noise_magnitudes), noise), sample_rate)


def apply_reverb(dry: AudioBuffer, params: ReverbParams) -> AudioBuffer:
    tape = _tape()
    out = reverb_batch(tape.constant(dry.samples[None]), tape.constant(params.impulse_response))
    return _buffer(out, dry.sample_rate)


def multiscale_spectral_loss(target: AudioBuffer, prediction: AudioBuffer) -> LossReport:
    if len(target) != len(prediction) or target.sample_rate != prediction.sample_rate:
        raise ShapeError(
            f"spectral loss needs matching audio: {len(target)} samples @ {target.sample_rate} Hz"
            f" vs {len(prediction)} samples @ {prediction.sample_rate} Hz"
        )
    tape = _tape()
    _, per_fft = spectral_loss_batch(target.samples[None], tape.constant(prediction.samples[None]))
    return LossReport.from_terms({size: float(t.value) for size, t in per_fft.items()})


def render_stems(controls: SynthControls, reverb: ReverbParams | None = None, seed: int = 0,
                 sample_rate: int = SAMPLE_RATE) -> RenderedStems:
    _check_noise_rate(sample_rate)
    tape = _tape()
    noise = white_noise((1, controls.num_frames * NOISE_HOP), seed)
    ir = tape.constant(reverb.impulse_response) if reverb is not None else None
    mix, harmonic, noisy = render_batch(
        _row(tape, controls.amplitude), _row(tape, controls.harm_distribution),
        _row(tape, controls.noise_magnitudes), controls.f0_hz.frames.T, noise, ir, sample_rate,
    )
    return RenderedStems(harmonic=_buffer(harmonic, sample_rate),
                         noise=_buffer(noisy, sample_rate), mix=_buffer(mix, sample_rate))


def render(controls: SynthControls, reverb: ReverbParams | None = None, seed: int = 0,
           sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Harmonic plus filtered noise, then reverb when given."""
    return render_stems(controls, reverb, seed, sample_rate).mix
