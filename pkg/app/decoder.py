"""Decoder network: per-input MLPs, GRU, output MLP, harmonic and noise heads; the z-encoder."""
from __future__ import annotations

import logging
from collections.abc import Mapping
from math import log as _ln

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import special as sp_special

from app import autodiff as ad
from app.autodiff import ShapeError, Tape, Tensor
from app.features import FeatureError, hz_to_midi
from app.models import (
    FRAME_RATE,
    LOUDNESS_FLOOR_DB,
    ConditioningFeatures,
    FrameSeries,
    ModelConfig,
)
from app.signal_core import bilinear_matrix
from app.synth import SynthControls, initial_impulse_response

_log = logging.getLogger("app.decoder")

SQUASH_MAX = 2.0
SQUASH_EXPONENT = _ln(10.0)
SQUASH_FLOOR = 1e-7
REVERB_PARAM = "reverb/ir"


class DecoderOutput(BaseModel):
    """Squashed control tensors: amplitude [B,T,1], harmonic distribution [B,T,K], noise [B,T,N]."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    amplitude: Tensor
    harm_distribution: Tensor
    noise_magnitudes: Tensor


# ------------------------------------------------------------------ #
# Fused recurrent and interpolation ops                               #
# ------------------------------------------------------------------ #

def gru(x: Tensor, w_in: Tensor, w_h: Tensor, b_in: Tensor, b_h: Tensor) -> Tensor:
    """Single-layer GRU over [B, T, D] from a zero state; gates ordered reset, update, new.

    n = tanh(x W_n + b_in_n + r * (h W_hn + b_hn)); h' = (1 - z) n + z h.
    """
    xv, wi, wh, bi, bh = x.value, w_in.value, w_h.value, b_in.value, b_h.value
    batch, steps, dim = xv.shape
    hidden = wh.shape[0]
    if wi.shape != (dim, 3 * hidden) or wh.shape != (hidden, 3 * hidden):
        raise ShapeError(f"gru: input {xv.shape}, w_in {wi.shape}, w_h {wh.shape} disagree")
    if bi.shape != (3 * hidden,) or bh.shape != (3 * hidden,):
        raise ShapeError(f"gru: biases {bi.shape} / {bh.shape}, expected ({3 * hidden},)")
    h2 = 2 * hidden
    gi = xv @ wi + bi
    hs = np.zeros((batch, steps + 1, hidden), xv.dtype)
    r_s = np.empty((batch, steps, hidden), xv.dtype)
    z_s = np.empty_like(r_s)
    n_s = np.empty_like(r_s)
    ghn_s = np.empty_like(r_s)
    for t in range(steps):
        h = hs[:, t]
        gh = h @ wh + bh
        r = sp_special.expit(gi[:, t, :hidden] + gh[:, :hidden])
        z = sp_special.expit(gi[:, t, hidden:h2] + gh[:, hidden:h2])
        n = np.tanh(gi[:, t, h2:] + r * gh[:, h2:])
        hs[:, t + 1] = (1.0 - z) * n + z * h
        r_s[:, t], z_s[:, t], n_s[:, t], ghn_s[:, t] = r, z, n, gh[:, h2:]

    def pullback(g: np.ndarray) -> tuple[np.ndarray, ...]:
        dgi = np.empty((batch, steps, 3 * hidden), g.dtype)
        dwh = np.zeros_like(wh)
        dbh = np.zeros_like(bh)
        dh_next = np.zeros((batch, hidden), g.dtype)
        for t in range(steps - 1, -1, -1):
            dh = g[:, t] + dh_next
            h_prev = hs[:, t]
            r, z, n, ghn = r_s[:, t], z_s[:, t], n_s[:, t], ghn_s[:, t]
            dan = dh * (1.0 - z) * (1.0 - n * n)
            dar = dan * ghn * r * (1.0 - r)
            daz = dh * (h_prev - n) * z * (1.0 - z)
            dgi[:, t] = np.concatenate([dar, daz, dan], axis=-1)
            dgh = np.concatenate([dar, daz, dan * r], axis=-1)
            dwh += h_prev.T @ dgh
            dbh += dgh.sum(axis=0)
            dh_next = dh * z + dgh @ wh.T
        dwi = xv.reshape(-1, dim).T @ dgi.reshape(-1, 3 * hidden)
        return dgi @ wi.T, dwi, dwh, dgi.sum(axis=(0, 1)), dbh

    return x.tape.record("gru", hs[:, 1:], (x, w_in, w_h, b_in, b_h), pullback)


def interp_frames(a: Tensor, num_frames: int) -> Tensor:
    """Linear resampling of [B, S, D] along time to [B, num_frames, D], end frames aligned."""
    m = bilinear_matrix(a.shape[-2], num_frames).astype(a.value.dtype)
    y = np.einsum("ts,bsd->btd", m, a.value)
    return a.tape.record("interp_frames", y, (a,),
                         lambda g: (np.einsum("ts,btd->bsd", m, g),))


# ------------------------------------------------------------------ #
# Parameters                                                          #
# ------------------------------------------------------------------ #

def _mlp_shapes(prefix: str, in_dim: int, config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    d = in_dim
    for i in range(config.mlp_layers):
        shapes[f"{prefix}/dense{i}/w"] = (d, config.mlp_units)
        shapes[f"{prefix}/dense{i}/b"] = (config.mlp_units,)
        shapes[f"{prefix}/dense{i}/ln_gain"] = (config.mlp_units,)
        shapes[f"{prefix}/dense{i}/ln_bias"] = (config.mlp_units,)
        d = config.mlp_units
    return shapes


def _gru_shapes(prefix: str, in_dim: int, units: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}/w_in": (in_dim, 3 * units),
        f"{prefix}/w_h": (units, 3 * units),
        f"{prefix}/b_in": (3 * units,),
        f"{prefix}/b_h": (3 * units,),
    }


def _inputs(config: ModelConfig) -> list[str]:
    return ["f0", "loudness"] + (["z"] if config.use_z else [])


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every trainable tensor implied by a model config."""
    shapes: dict[str, tuple[int, ...]] = {}
    for name in _inputs(config):
        shapes.update(_mlp_shapes(f"mlp_{name}", config.z_dim if name == "z" else 1, config))
    concat_dim = len(_inputs(config)) * config.mlp_units
    shapes.update(_gru_shapes("gru", concat_dim, config.gru_units))
    shapes.update(_mlp_shapes("mlp_out", config.gru_units + concat_dim, config))
    shapes["head_harmonic/w"] = (config.mlp_units, config.n_harmonics + 1)
    shapes["head_harmonic/b"] = (config.n_harmonics + 1,)
    shapes["head_noise/w"] = (config.mlp_units, config.n_noise)
    shapes["head_noise/b"] = (config.n_noise,)
    if config.use_z:
        shapes["z/norm_scale"] = (config.mfcc_count,)
        shapes["z/norm_bias"] = (config.mfcc_count,)
        shapes.update(_gru_shapes("z/gru", config.mfcc_count, config.z_gru_units))
        shapes["z/dense/w"] = (config.z_gru_units, config.z_dim)
        shapes["z/dense/b"] = (config.z_dim,)
    if config.use_reverb:
        shapes[REVERB_PARAM] = (config.reverb_length,)
    return shapes


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, shape)


def _orthogonal_blocks(rng: np.random.Generator, units: int, blocks: int) -> np.ndarray:
    mats = []
    for _ in range(blocks):
        q, r = np.linalg.qr(rng.normal(size=(units, units)))
        mats.append(q * np.sign(np.diag(r)))
    return np.concatenate(mats, axis=1)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform dense kernels, orthogonal recurrent kernels, unit gains, zero biases."""
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit("/", 1)[-1]
        if name == REVERB_PARAM:
            params[name] = initial_impulse_response(shape[0], rng)
        elif leaf == "w_h":
            params[name] = _orthogonal_blocks(rng, shape[0], 3)
        elif leaf in ("w", "w_in"):
            params[name] = _glorot(rng, shape)
        elif leaf in ("ln_gain", "norm_scale"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(params: Mapping[str, np.ndarray], config: ModelConfig) -> None:
    """Raise ShapeError naming the first tensor that does not fit the config."""
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise ShapeError(f"missing parameter {name!r} (expected shape {shape})")
        if tuple(params[name].shape) != shape:
            raise ShapeError(
                f"parameter {name!r} has shape {tuple(params[name].shape)}, config expects {shape}"
            )
    extra = sorted(set(params) - set(expected))
    if extra:
        raise ShapeError(f"unexpected parameter {extra[0]!r} for this config")


# ------------------------------------------------------------------ #
# Forward                                                             #
# ------------------------------------------------------------------ #

def dense(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{prefix}/w"]), params[f"{prefix}/b"])


def mlp_forward(x: Tensor, params: Mapping[str, Tensor], prefix: str, layers: int) -> Tensor:
    """`layers` repetitions of Dense -> LayerNorm -> ReLU."""
    h = x
    for i in range(layers):
        p = f"{prefix}/dense{i}"
        h = dense(h, params, p)
        h = ad.layer_norm(h, params[f"{p}/ln_gain"], params[f"{p}/ln_bias"])
        h = ad.relu(h)
    return h


def squash(x: Tensor) -> Tensor:
    """2 * sigmoid(x)**ln(10) + 1e-7: strictly positive, bounded by 2."""
    return ad.add(ad.mul(ad.power(ad.sigmoid(x), SQUASH_EXPONENT), SQUASH_MAX), SQUASH_FLOOR)


def scale_f0(f0_hz: np.ndarray) -> np.ndarray:
    return hz_to_midi(np.maximum(f0_hz, 1.0)) / 127.0


def scale_loudness(loudness_db: np.ndarray) -> np.ndarray:
    return (loudness_db - LOUDNESS_FLOOR_DB) / -LOUDNESS_FLOOR_DB


def z_encode_batch(tape: Tape, params: Mapping[str, Tensor], mfcc: np.ndarray,
                   num_frames: int) -> Tensor:
    """[B, Tm, C] MFCCs -> [B, num_frames, z_dim]: instance norm over time, GRU, dense, resample."""
    x = ad.normalize(tape.constant(mfcc), axis=-2)
    x = ad.add(ad.mul(x, params["z/norm_scale"]), params["z/norm_bias"])
    h = gru(x, params["z/gru/w_in"], params["z/gru/w_h"], params["z/gru/b_in"],
            params["z/gru/b_h"])
    return interp_frames(dense(h, params, "z/dense"), num_frames)


def decode_batch(tape: Tape, params: Mapping[str, Tensor], f0_hz: np.ndarray,
                 loudness_db: np.ndarray, config: ModelConfig,
                 mfcc: np.ndarray | None = None) -> DecoderOutput:
    """Controls for a [B, T] batch of f0 / loudness (and [B, Tm, C] MFCC when use_z)."""
    if f0_hz.shape != loudness_db.shape or f0_hz.ndim != 2:
        raise ShapeError(
            f"decode: f0 {f0_hz.shape} and loudness {loudness_db.shape} must be [B, T]")
    batch, n_frames = f0_hz.shape
    branches = [
        mlp_forward(tape.constant(scale_f0(f0_hz)[..., None]), params, "mlp_f0",
                    config.mlp_layers),
        mlp_forward(tape.constant(scale_loudness(loudness_db)[..., None]), params,
                    "mlp_loudness", config.mlp_layers),
    ]
    if config.use_z:
        if mfcc is None:
            raise FeatureError("this model conditions on MFCC, but none were given")
        if mfcc.ndim != 3 or mfcc.shape[0] != batch or mfcc.shape[-1] != config.mfcc_count:
            raise ShapeError(
                f"decode: MFCC shape {mfcc.shape}, expected [B, Tm, {config.mfcc_count}]")
        z = z_encode_batch(tape, params, mfcc, n_frames)
        branches.append(mlp_forward(z, params, "mlp_z", config.mlp_layers))
    joined = ad.concat(branches, axis=-1)
    h = gru(joined, params["gru/w_in"], params["gru/w_h"], params["gru/b_in"], params["gru/b_h"])
    h = mlp_forward(ad.concat([h, joined], axis=-1), params, "mlp_out", config.mlp_layers)
    harmonic = squash(dense(h, params, "head_harmonic"))
    amplitude = ad.take_slice(harmonic, (Ellipsis, slice(0, 1)))
    dist = ad.take_slice(harmonic, (Ellipsis, slice(1, None)))
    dist = ad.div(dist, ad.broadcast_to(ad.reduce_sum(dist, axis=-1, keepdims=True), dist.shape))
    noise = squash(dense(h, params, "head_noise"))
    return DecoderOutput(amplitude=amplitude, harm_distribution=dist, noise_magnitudes=noise)


def _tape_params(tape: Tape, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: tape.param(name, value) for name, value in params.items()}


def z_encode(mfcc: FrameSeries, params: Mapping[str, np.ndarray], config: ModelConfig,
             num_frames: int | None = None) -> FrameSeries:
    """16-dim latent at 250 Hz from 30 MFCCs at 125 Hz (twice the frame count by default)."""
    if mfcc.dim != config.mfcc_count:
        raise ShapeError(f"z_encode: MFCC dim {mfcc.dim}, expected {config.mfcc_count}")
    tape = Tape(np.float64)
    z = z_encode_batch(tape, _tape_params(tape, params), mfcc.frames[None],
                       num_frames or 2 * mfcc.num_frames)
    return FrameSeries(frames=z.value[0], frame_rate=FRAME_RATE)


def decode(f: ConditioningFeatures, params: Mapping[str, np.ndarray], config: ModelConfig,
           dtype: type = np.float32) -> SynthControls:
    """Run the decoder on one example and package the controls with the input f0."""
    if config.use_z and f.mfcc is None:
        raise FeatureError("this model conditions on MFCC, but the features have none")
    tape = Tape(dtype)
    out = decode_batch(
        tape, _tape_params(tape, params), f.f0_hz.frames.T, f.loudness_db.frames.T, config,
        mfcc=f.mfcc.frames[None] if config.use_z and f.mfcc is not None else None,
    )

    def series(t: Tensor) -> FrameSeries:
        return FrameSeries(frames=t.value[0].astype(np.float64))

    return SynthControls(
        amplitude=series(out.amplitude),
        harm_distribution=series(out.harm_distribution),
        noise_magnitudes=series(out.noise_magnitudes),
        f0_hz=f.f0_hz,
    )
