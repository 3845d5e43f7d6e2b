from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from app import trainer
from app.applog import tail_app_log
from app.audio_io import write_wav
from app.decoder import init_params
from app.models import ModelConfig, TrainConfig
from app.store import load_checkpoint, save_dataset
from app.synth import LossReport
from app.synthetic import synthetic_voice
from app.trainer import (
    Adam,
    DatasetError,
    TrainingDiverged,
    chunk_starts,
    loss_step,
    make_dataset,
    open_dataset,
    sample_batch,
    train,
)

TINY = ModelConfig(n_harmonics=4, n_noise=5, mlp_units=8, mlp_layers=1, gru_units=8,
                   reverb_length=64)


def tiny_config(**overrides) -> TrainConfig:
    base = dict(model=TINY, batch_size=2, steps=4, example_seconds=0.5, log_every=1,
                checkpoint_every=2, learning_rate=1e-3)
    return TrainConfig(**{**base, **overrides})


@pytest.fixture
def voice_dir(tmp_path) -> Path:
    d = tmp_path / "voice"
    d.mkdir()
    audio, _ = synthetic_voice(6.0, seed=3)
    write_wav(d / "voice.wav", audio)
    return d


@pytest.fixture
def dataset(voice_dir):
    return make_dataset(voice_dir, example_seconds=0.5, workers=1)


def read_loss_rows(path: Path) -> list[list[str]]:
    with path.open(newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def test_chunk_starts():
    assert chunk_starts(10 * 16000, 4 * 16000, 16000) == [i * 16000 for i in range(7)]
    assert chunk_starts(4 * 16000, 4 * 16000, 16000) == [0]
    assert chunk_starts(3 * 16000, 4 * 16000, 16000) == []


def test_make_dataset_chunks_and_drops_short_files(tmp_path):
    long, _ = synthetic_voice(10.0, seed=1)
    short, _ = synthetic_voice(2.0, seed=2)
    write_wav(tmp_path / "long.wav", long)
    write_wav(tmp_path / "short.wav", short)
    dataset = make_dataset(tmp_path, example_seconds=4.0, workers=2)
    assert len(dataset) == 7
    assert [e.source for e in dataset.examples] == [f"long@{i}s" for i in range(7)]
    assert all(len(e.audio) == 64000 for e in dataset.examples)
    assert all(e.features.num_frames == 1000 for e in dataset.examples)
    assert 40.0 < dataset.stats.mean_midi_pitch < 65.0
    assert any("dropped short.wav" in line for line in tail_app_log(level="warn"))


def test_example_order_ignores_worker_count(voice_dir, dataset):
    again = make_dataset(voice_dir, example_seconds=0.5, workers=4)
    assert [e.source for e in again.examples] == [e.source for e in dataset.examples]
    assert again.stats == dataset.stats


def test_make_dataset_errors(tmp_path):
    with pytest.raises(DatasetError, match="not a directory"):
        make_dataset(tmp_path / "absent")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="no audio files"):
        make_dataset(tmp_path / "empty")
    junk = tmp_path / "junk"
    junk.mkdir()
    (junk / "broken.wav").write_bytes(b"not audio at all")
    with pytest.raises(DatasetError, match="no decodable audio"):
        make_dataset(junk)
    assert any("skipping broken.wav" in line for line in tail_app_log(level="warn"))


def test_open_dataset_prefers_prepared_chunks(tmp_path, dataset):
    save_dataset(dataset, tmp_path / "prepared")
    loaded = open_dataset(tmp_path / "prepared")
    assert len(loaded) == len(dataset)
    assert loaded.stats == dataset.stats
    with pytest.raises(DatasetError):
        open_dataset(tmp_path / "absent")


def test_sample_batch_is_a_function_of_seed_and_step(dataset):
    config = tiny_config()
    a = sample_batch(dataset, config, 7)
    b = sample_batch(dataset, config, 7)
    np.testing.assert_array_equal(a.target, b.target)
    assert a.noise_seed == b.noise_seed
    assert a.f0.shape == (2, 125)
    assert a.target.shape == (2, 8000)
    assert sample_batch(dataset, config, 8).noise_seed != a.noise_seed


def test_sample_batch_needs_mfcc_for_latent_models(dataset):
    config = tiny_config(model=TINY.model_copy(update={"use_z": True}))
    with pytest.raises(DatasetError, match="with-mfcc"):
        sample_batch(dataset, config, 1)


def test_adam_schedule_and_clipping():
    adam = Adam(1e-3, 0.98, clip_norm=1.0)
    assert adam.lr_at(0) == pytest.approx(1e-3)
    assert adam.lr_at(1000) == pytest.approx(0.98e-3)
    assert adam.lr_at(10000) == pytest.approx(0.98 ** 10 * 1e-3)
    clipped, norm = adam.clip({"a": np.array([3.0, 4.0], dtype=np.float32)})
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(clipped["a"], [0.6, 0.8], rtol=1e-6)


def test_adam_first_step_moves_by_learning_rate():
    adam = Adam(0.01, 1.0, clip_norm=100.0)
    params = {"w": np.array([1.0, -1.0], dtype=np.float32)}
    m = {"w": np.zeros(2, np.float32)}
    v = {"w": np.zeros(2, np.float32)}
    adam.update(params, {"w": np.array([0.5, -2.0], dtype=np.float32)}, m, v, step=1)
    np.testing.assert_allclose(params["w"], [0.99, -0.99], rtol=1e-5)
    assert params["w"].dtype == np.float32


def test_train_writes_log_and_checkpoint(tmp_path, dataset):
    seen = []
    config = tiny_config(steps=5, log_every=2)
    final = train(config, dataset, tmp_path / "run", on_step=lambda s, r: seen.append(s))
    assert seen == [1, 2, 3, 4, 5]
    assert final.step == 5
    rows = read_loss_rows(tmp_path / "run" / "loss.csv")
    assert rows[0] == ["step", "total", "L2048", "L1024", "L512", "L256", "L128", "L64"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 4, 5]
    for r in rows[1:]:
        assert float(r[1]) == pytest.approx(sum(float(x) for x in r[2:]))
    saved = load_checkpoint(tmp_path / "run" / "model.ckpt")
    assert saved.step == 5
    assert saved.stats == dataset.stats
    assert set(saved.adam_m) == set(saved.params)
    log = (tmp_path / "run" / "train.log").read_text(encoding="utf-8")
    assert "step 5/5" in log and "grad_norm" in log


def test_resume_matches_an_uninterrupted_run(tmp_path, dataset):
    full = train(tiny_config(steps=4), dataset, tmp_path / "full")
    train(tiny_config(steps=2), dataset, tmp_path / "part")
    halfway = load_checkpoint(tmp_path / "part" / "model.ckpt")
    resumed = train(tiny_config(steps=4), dataset, tmp_path / "part", resume=halfway)
    assert resumed.step == 4
    for name, value in full.params.items():
        np.testing.assert_allclose(resumed.params[name], value, rtol=0, atol=1e-6)
    full_rows = read_loss_rows(tmp_path / "full" / "loss.csv")
    part_rows = read_loss_rows(tmp_path / "part" / "loss.csv")
    assert [r[0] for r in part_rows] == [r[0] for r in full_rows]
    step3 = {int(r[0]): r for r in full_rows[1:]}[3]
    resumed3 = {int(r[0]): r for r in part_rows[1:]}[3]
    for full_value, resumed_value in zip(step3[1:], resumed3[1:]):
        assert float(resumed_value) == pytest.approx(float(full_value), abs=1e-6)


def test_divergence_keeps_last_checkpoint(tmp_path, dataset, monkeypatch):
    real_step = trainer.loss_step

    def flaky(params, batch, config, **kwargs):
        report, grads = real_step(params, batch, config, **kwargs)
        if flaky.calls == 2:
            report = LossReport.model_construct(total=float("nan"), per_fft=report.per_fft)
            grads = {}
        flaky.calls += 1
        return report, grads

    flaky.calls = 0
    monkeypatch.setattr(trainer, "loss_step", flaky)
    with pytest.raises(TrainingDiverged, match="step 3") as info:
        train(tiny_config(steps=6), dataset, tmp_path / "run")
    assert info.value.step == 3
    assert info.value.checkpoint == tmp_path / "run" / "model.ckpt"
    assert load_checkpoint(tmp_path / "run" / "model.ckpt").step == 2
    rows = read_loss_rows(tmp_path / "run" / "loss.csv")
    assert [int(r[0]) for r in rows[1:]] == [1, 2]
    assert "diverged" in (tmp_path / "run" / "train.log").read_text(encoding="utf-8")


def test_single_step_run_logs_one_row(tmp_path, dataset):
    train(tiny_config(steps=1), dataset, tmp_path / "run")
    rows = read_loss_rows(tmp_path / "run" / "loss.csv")
    assert [int(r[0]) for r in rows[1:]] == [1]


def test_zero_learning_rate_leaves_params_alone(tmp_path, dataset):
    config = tiny_config(steps=2, learning_rate=0.0)
    final = train(config, dataset, tmp_path / "run")
    start = init_params(config.model, np.random.default_rng(config.seed))
    for name, value in start.items():
        np.testing.assert_array_equal(final.params[name], value.astype(np.float32))


def test_constant_pitch_corpus_statistics(tmp_path, make_sine):
    write_wav(tmp_path / "a4.wav", make_sine(440.0, 3.0, amplitude=0.5))
    stats = make_dataset(tmp_path, example_seconds=1.0, workers=1).stats
    assert stats.mean_midi_pitch == pytest.approx(69.0, abs=0.05)


@pytest.mark.parametrize("use_z", [False, True])
def test_one_backward_reaches_every_parameter(voice_dir, use_z):
    config = tiny_config(model=TINY.model_copy(update={"use_z": use_z, "z_gru_units": 6}))
    data = make_dataset(voice_dir, example_seconds=0.5, with_mfcc=use_z, workers=1)
    params = init_params(config.model, np.random.default_rng(7))
    report, grads = loss_step(params, sample_batch(data, config, 1), config, dtype=np.float64)
    assert np.isfinite(report.total)
    assert set(grads) == set(params)
    dead = [name for name, g in grads.items() if not np.linalg.norm(g) > 0]
    assert dead == []
