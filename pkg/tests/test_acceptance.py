"""Desk-scale training runs. Minutes each; run with `pytest -m slow`."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from app.audio_io import write_wav
from app.conffile import load_train_config
from app.decoder import REVERB_PARAM, decode
from app.features import STATS_CONFIDENCE, extract_features, hz_to_midi, track_f0
from app.figures import read_loss_log, smooth
from app.synth import ReverbParams, render
from app.synthetic import synthetic_voice
from app.trainer import make_dataset, train

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def voice(tmp_path):
    d = tmp_path / "voice"
    audio, _ = synthetic_voice(30.0, seed=0)
    write_wav(d / "voice.wav", audio)
    return audio, make_dataset(d, workers=2)


def test_desk_overfit_learns_the_voice(tmp_path, voice):
    audio, dataset = voice
    config, _ = load_train_config(CONFIGS / "desk.conf")
    final = train(config, dataset, tmp_path / "run")

    totals = smooth(read_loss_log(tmp_path / "run" / "loss.csv").column("total"))
    assert totals[-1] < 0.2 * totals[0]

    features = extract_features(audio)
    controls = decode(features, final.params, config.model)
    out = render(controls, ReverbParams(impulse_response=final.params[REVERB_PARAM]))
    out_f0, _ = track_f0(out)
    n = min(out_f0.num_frames, features.num_frames)
    voiced = features.f0_confidence.values[:n] >= STATS_CONFIDENCE
    cents = 100.0 * np.abs(hz_to_midi(np.maximum(out_f0.values[:n][voiced], 1e-3))
                           - hz_to_midi(features.f0_hz.values[:n][voiced]))
    assert np.mean(cents <= 50.0) >= 0.9


def test_synthesizer_size_sweep(tmp_path, voice):
    _, dataset = voice
    decreased = 0
    sweep = sorted((CONFIGS / "sweep").glob("*.conf"))
    assert len(sweep) == 9
    for path in sweep:
        config, _ = load_train_config(path)
        train(config, dataset, tmp_path / path.stem)
        totals = read_loss_log(tmp_path / path.stem / "loss.csv").column("total")
        assert np.all(np.isfinite(totals)), path.name
        decreased += int(totals[-1] < totals[0])
    assert decreased >= 7


def test_same_seed_same_loss_log(tmp_path, voice):
    _, dataset = voice
    config, _ = load_train_config(CONFIGS / "desk.conf")
    config = config.model_copy(update={"steps": 100})
    train(config, dataset, tmp_path / "a")
    train(config, dataset, tmp_path / "b")
    a = (tmp_path / "a" / "loss.csv").read_bytes()
    assert a == (tmp_path / "b" / "loss.csv").read_bytes()
