"""Finite-difference checks of primitive ops, synthesizer paths and the full training graph.

Every case runs on a 64-bit tape. Primitive ops must agree with central differences to
OP_TOLERANCE, the full decode -> render -> loss graph to GRAPH_TOLERANCE.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Mapping

import numpy as np
from pydantic import BaseModel

from app import autodiff as ad
from app.autodiff import GradCheckResult, LossFn, Tape, Tensor, grad_check
from app.decoder import REVERB_PARAM, decode_batch, gru, init_params, mlp_forward, squash
from app.models import ModelConfig
from app.signal_core import a_weighted_loudness, hann
from app.synth import (
    NOISE_HOP,
    filtered_noise_batch,
    harmonic_synth_batch,
    render_batch,
    reverb_batch,
    spectral_loss_batch,
    white_noise,
)
from app.synthetic import synthetic_voice

_log = logging.getLogger("app.gradcheck")

OP_TOLERANCE = 1e-5
GRAPH_TOLERANCE = 1e-4

CaseBuilder = Callable[[np.random.Generator], tuple[dict[str, np.ndarray], LossFn]]


class CaseReport(BaseModel):
    case: str
    tolerance: float
    results: dict[str, GradCheckResult]

    @property
    def worst(self) -> float:
        return max((r.max_rel_error for r in self.results.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _project(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar sum(t * w) with fixed random weights, so every output element matters."""
    return ad.reduce_sum(ad.mul(t, rng.normal(size=t.shape)))


# ------------------------------------------------------------------ #
# Primitive ops                                                       #
# ------------------------------------------------------------------ #

def _arithmetic(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    params = {"a": rng.normal(size=(3, 4)), "b": rng.uniform(1.0, 2.0, size=4)}
    seed = int(rng.integers(2**31))

    def f(tape: Tape, p: Mapping[str, Tensor]) -> Tensor:
        a, b = p["a"], p["b"]
        out = ad.sub(ad.add(ad.mul(a, b), ad.div(a, b)), ad.neg(ad.broadcast_to(b, a.shape)))
        return _project(out, np.random.default_rng(seed))

    return params, f


def _matmul(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    params = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 5))}
    seed = int(rng.integers(2**31))
    return params, lambda tape, p: _project(ad.matmul(p["a"], p["b"]), np.random.default_rng(seed))


def _elementwise(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    params = {"x": rng.normal(size=(4, 3)), "pos": rng.uniform(0.5, 2.0, size=(4, 3))}
    seed = int(rng.integers(2**31))

    def f(tape: Tape, p: Mapping[str, Tensor]) -> Tensor:
        x, pos = p["x"], p["pos"]
        parts = [ad.sigmoid(x), ad.tanh(x), ad.exp(ad.mul(x, 0.5)), ad.log(pos),
                 ad.power(pos, 2.3), ad.absolute(ad.add(x, 3.0))]
        return _project(ad.concat(parts, axis=-1), np.random.default_rng(seed))

    return params, f


def _reductions(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    params = {"x": rng.normal(size=(2, 3, 4))}
    seed = int(rng.integers(2**31))

    def f(tape: Tape, p: Mapping[str, Tensor]) -> Tensor:
        x = p["x"]
        s = ad.reduce_sum(x, axis=-1, keepdims=True)
        m = ad.reduce_mean(x, axis=(0, 1))
        r = ad.reshape(ad.take_slice(x, (slice(None), slice(1, 3))), (2, 8))
        parts = [ad.reshape(ad.broadcast_to(s, x.shape), (2, 12)), r,
                 ad.broadcast_to(ad.reshape(m, (1, 4)), (2, 4))]
        return _project(ad.concat(parts, axis=-1), np.random.default_rng(seed))

    return params, f


def _normalization(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    params = {"x": rng.normal(size=(3, 5, 6)), "gain": rng.uniform(0.5, 1.5, 6),
              "bias": rng.normal(size=6)}
    seed = int(rng.integers(2**31))

    def f(tape: Tape, p: Mapping[str, Tensor]) -> Tensor:
        over_time = ad.normalize(p["x"], axis=-2)
        per_frame = ad.layer_norm(p["x"], p["gain"], p["bias"])
        return _project(ad.add(over_time, per_frame), np.random.default_rng(seed))

    return params, f


def _spectral(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    params = {"x": rng.normal(size=(2, 300))}
    seed = int(rng.integers(2**31))

    def f(tape: Tape, p: Mapping[str, Tensor]) -> Tensor:
        mags = ad.fft_real_mag(ad.mul(ad.frame(p["x"], 64, 16), hann(64)))
        return _project(mags, np.random.default_rng(seed))

    return params, f


def _overlap(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    params = {"frames": rng.normal(size=(2, 6, 48))}
    seed = int(rng.integers(2**31))
    return params, lambda tape, p: _project(ad.overlap_add(p["frames"], 16),
                                          np.random.default_rng(seed))


def _recurrent(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    d, u = 3, 4
    params = {
        "x": rng.normal(size=(2, 7, d)),
        "w_in": rng.normal(scale=0.5, size=(d, 3 * u)),
        "w_h": rng.normal(scale=0.5, size=(u, 3 * u)),
        "b_in": rng.normal(scale=0.1, size=3 * u),
        "b_h": rng.normal(scale=0.1, size=3 * u),
    }
    seed = int(rng.integers(2**31))
    return params, lambda tape, p: _project(
        gru(p["x"], p["w_in"], p["w_h"], p["b_in"], p["b_h"]), np.random.default_rng(seed)
    )


def _dense_stack(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    params = {
        "x": rng.normal(size=(2, 5, 3)),
        "mlp/dense0/w": rng.normal(size=(3, 6)),
        "mlp/dense0/b": rng.normal(scale=0.1, size=6),
        "mlp/dense0/ln_gain": rng.uniform(0.5, 1.5, 6),
        "mlp/dense0/ln_bias": rng.normal(scale=0.1, size=6),
    }
    seed = int(rng.integers(2**31))
    return params, lambda tape, p: _project(squash(mlp_forward(p["x"], p, "mlp", 1)),
                                          np.random.default_rng(seed))


# ------------------------------------------------------------------ #
# Synthesizer paths                                                   #
# ------------------------------------------------------------------ #

def _harmonic(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    frames, k = 6, 8
    f0 = rng.uniform(200.0, 1500.0, size=(1, frames))
    params = {"amplitude": rng.uniform(0.2, 1.0, size=(1, frames, 1)),
              "harm": rng.uniform(0.1, 1.0, size=(1, frames, k))}
    seed = int(rng.integers(2**31))
    return params, lambda tape, p: _project(
        harmonic_synth_batch(p["amplitude"], p["harm"], f0), np.random.default_rng(seed)
    )


def _noise(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    frames = 5
    params = {"mags": rng.uniform(0.1, 1.5, size=(1, frames, 65)),
              "coarse": rng.uniform(0.1, 1.5, size=(1, frames, 10))}
    noise = white_noise((1, frames * NOISE_HOP), int(rng.integers(2**31)))
    seed = int(rng.integers(2**31))

    def f(tape: Tape, p: Mapping[str, Tensor]) -> Tensor:
        out = ad.add(filtered_noise_batch(p["mags"], noise),
                     filtered_noise_batch(p["coarse"], noise))
        return _project(out, np.random.default_rng(seed))

    return params, f


def _reverb(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    params = {"dry": rng.normal(size=(2, 200)), "ir": rng.normal(scale=0.1, size=32)}
    seed = int(rng.integers(2**31))
    return params, lambda tape, p: _project(reverb_batch(p["dry"], p["ir"]),
                                          np.random.default_rng(seed))


def _loss(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
    target = rng.normal(size=(1, 1024))
    params = {"prediction": target[0] + rng.normal(scale=0.3, size=1024)}

    def f(tape: Tape, p: Mapping[str, Tensor]) -> Tensor:
        total, _ = spectral_loss_batch(target, ad.reshape(p["prediction"], (1, 1024)))
        return total

    return params, f


# ------------------------------------------------------------------ #
# Full graph                                                          #
# ------------------------------------------------------------------ #

GRAPH_MODEL = ModelConfig(
    n_harmonics=6, n_noise=9, mlp_units=8, mlp_layers=1, gru_units=8, reverb_length=64,
)


def full_graph_case(seconds: float = 0.25, model: ModelConfig = GRAPH_MODEL
                    ) -> CaseBuilder:
    """decode -> render (harmonic + noise + reverb) -> multi-scale loss on a synthetic clip."""

    def build(rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossFn]:
        audio, f0_track = synthetic_voice(seconds, seed=int(rng.integers(2**31)))
        n_frames = len(audio) // NOISE_HOP
        f0 = f0_track.values[None, :n_frames]
        loudness = a_weighted_loudness(audio).values[None, :n_frames]
        target = audio.samples[None, : n_frames * NOISE_HOP]
        noise = white_noise(target.shape, int(rng.integers(2**31)))
        params = init_params(model, rng)
        # lift zero biases and unit gains off symmetric points
        for name, value in params.items():
            if name != REVERB_PARAM:
                params[name] = value + rng.normal(scale=0.1, size=value.shape)

        def f(tape: Tape, p: Mapping[str, Tensor]) -> Tensor:
            out = decode_batch(tape, p, f0, loudness, model)
            mix, _, _ = render_batch(out.amplitude, out.harm_distribution, out.noise_magnitudes,
                                     f0, noise, p.get(REVERB_PARAM))
            total, _ = spectral_loss_batch(target, mix)
            return total

        return params, f

    return build


OP_CASES: dict[str, CaseBuilder] = {
    "arithmetic": _arithmetic,
    "matmul": _matmul,
    "elementwise": _elementwise,
    "reductions": _reductions,
    "normalization": _normalization,
    "spectral": _spectral,
    "overlap_add": _overlap,
    "gru": _recurrent,
    "dense_stack": _dense_stack,
    "harmonic_synth": _harmonic,
    "filtered_noise": _noise,
    "reverb": _reverb,
    "spectral_loss": _loss,
}


def case_names() -> list[str]:
    return [*OP_CASES, "full_graph"]


def run_case(name: str, builder: CaseBuilder, tolerance: float, seed: int = 0,
             coords: int = 64) -> CaseReport:
    params, f = builder(np.random.default_rng(seed))
    results = grad_check(f, params, coords=coords, seed=seed)
    report = CaseReport(case=name, tolerance=tolerance, results=results)
    _log.debug("grad-check %s: worst %.3g (tolerance %g)", name, report.worst, tolerance)
    return report


def run_suite(seed: int = 0, coords: int = 64, seconds: float = 0.25,
              only: list[str] | None = None) -> list[CaseReport]:
    """Run the op cases and the full-graph case (or just those named in `only`)."""
    names = only or case_names()
    unknown = sorted(set(names) - set(case_names()))
    if unknown:
        choices = ", ".join(case_names())
        raise ValueError(f"unknown grad-check case {unknown[0]!r}; choose from {choices}")
    reports: list[CaseReport] = []
    for name in names:
        if name == "full_graph":
            reports.append(run_case(name, full_graph_case(seconds), GRAPH_TOLERANCE, seed, coords))
        else:
            reports.append(run_case(name, OP_CASES[name], OP_TOLERANCE, seed, coords))
    return reports
