from __future__ import annotations

import numpy as np
import pytest

from app.decoder import init_params
from app.models import (
    AudioBuffer,
    Checkpoint,
    ConditioningFeatures,
    Dataset,
    DatasetStats,
    Example,
    FrameSeries,
    ModelConfig,
    TrainConfig,
)
from app.store import (
    CheckpointError,
    decode_tensors,
    encode_tensors,
    is_prepared,
    load_checkpoint,
    load_dataset,
    meta_path,
    save_checkpoint,
    save_dataset,
)

TINY = ModelConfig(n_harmonics=4, n_noise=5, mlp_units=6, mlp_layers=1, gru_units=3,
                   reverb_length=16)
STATS = DatasetStats(mean_midi_pitch=57.0, mean_loudness_db=-30.0, std_loudness_db=4.0)


@pytest.fixture
def checkpoint(rng) -> Checkpoint:
    params = {k: v.astype(np.float32) for k, v in init_params(TINY, rng).items()}
    return Checkpoint(
        params=params,
        step=12,
        config=TrainConfig(model=TINY, steps=100),
        stats=STATS,
        adam_m={k: np.full_like(v, 0.5) for k, v in params.items()},
        adam_v={k: np.full_like(v, 0.25) for k, v in params.items()},
    )


def test_tensor_file_layout():
    data = encode_tensors({"b": np.zeros((2, 3)), "a": np.ones(1)})
    assert data[:4] == b"SMSD"
    # header 12, then "a": 2 + 1 + 1 + 4 + 4, then "b": 2 + 1 + 1 + 8 + 24
    assert len(data) == 12 + 12 + 36
    back = decode_tensors(data)
    assert list(back) == ["a", "b"]
    assert back["b"].shape == (2, 3) and back["b"].dtype == np.float32


def test_checkpoint_round_trip(tmp_path, checkpoint):
    path = tmp_path / "model.ckpt"
    save_checkpoint(checkpoint, path)
    assert meta_path(path).is_file()
    loaded = load_checkpoint(path)
    assert loaded.step == 12
    assert loaded.config == checkpoint.config
    assert loaded.stats == STATS
    assert set(loaded.params) == set(checkpoint.params)
    for name, value in checkpoint.params.items():
        np.testing.assert_array_equal(loaded.params[name], value)
        np.testing.assert_array_equal(loaded.adam_v[name], 0.25)
    assert not list(tmp_path.glob("*.tmp"))


def test_truncated_checkpoint(tmp_path, checkpoint):
    path = tmp_path / "model.ckpt"
    save_checkpoint(checkpoint, path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_trailing_bytes_and_bad_magic(tmp_path, checkpoint):
    path = tmp_path / "model.ckpt"
    save_checkpoint(checkpoint, path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"RIFF" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_missing_checkpoint_and_metadata(tmp_path, checkpoint):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "absent.ckpt")
    path = tmp_path / "model.ckpt"
    save_checkpoint(checkpoint, path)
    meta_path(path).unlink()
    with pytest.raises(CheckpointError, match="metadata"):
        load_checkpoint(path)


def test_checkpoint_against_other_config(tmp_path, checkpoint):
    path = tmp_path / "model.ckpt"
    save_checkpoint(checkpoint, path)
    with pytest.raises(CheckpointError, match="head_harmonic"):
        load_checkpoint(path, TINY.model_copy(update={"n_harmonics": 8}))


def example(rng, source: str, seconds: float = 0.5, with_mfcc: bool = False) -> Example:
    n = int(seconds * 16000)
    frames = n // 64
    return Example(
        audio=AudioBuffer(samples=rng.uniform(-0.5, 0.5, n)),
        features=ConditioningFeatures(
            f0_hz=FrameSeries(frames=rng.uniform(100, 300, frames)),
            f0_confidence=FrameSeries(frames=rng.uniform(0, 1, frames)),
            loudness_db=FrameSeries(frames=rng.uniform(-60, -10, frames)),
            mfcc=FrameSeries(frames=rng.normal(size=(frames // 2, 30)), frame_rate=125)
            if with_mfcc else None,
        ),
        source=source,
    )


def test_dataset_round_trip(tmp_path, rng):
    dataset = Dataset(examples=[example(rng, "take@0s", with_mfcc=True),
                                example(rng, "take@1.5s", with_mfcc=True)], stats=STATS)
    written = save_dataset(dataset, tmp_path / "prepared")
    assert [p.name for p in written] == ["00000_take_0s.wav", "00001_take_1_5s.wav"]
    assert is_prepared(tmp_path / "prepared")
    loaded = load_dataset(tmp_path / "prepared")
    assert len(loaded) == 2
    assert loaded.stats == STATS
    for before, after in zip(dataset.examples, loaded.examples):
        np.testing.assert_allclose(after.audio.samples, before.audio.samples, atol=1e-7)
        np.testing.assert_allclose(after.features.f0_hz.values, before.features.f0_hz.values,
                                   rtol=1e-8)
        assert after.features.mfcc is not None
        np.testing.assert_allclose(after.features.mfcc.frames, before.features.mfcc.frames,
                                   rtol=1e-8, atol=1e-12)


def test_saving_again_replaces_old_chunks(tmp_path, rng):
    out = tmp_path / "prepared"
    save_dataset(Dataset(examples=[example(rng, f"a@{i}s") for i in range(3)], stats=STATS), out)
    save_dataset(Dataset(examples=[example(rng, "b@0s")], stats=STATS), out)
    assert sorted(p.name for p in (out / "chunks").glob("*.wav")) == ["00000_b_0s.wav"]
    assert len(load_dataset(out)) == 1


def test_empty_dataset_directory(tmp_path):
    (tmp_path / "chunks").mkdir()
    assert not is_prepared(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


def test_resaving_a_loaded_checkpoint_is_byte_identical(tmp_path, checkpoint):
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(checkpoint, first)
    save_checkpoint(load_checkpoint(first), second)
    assert first.read_bytes() == second.read_bytes()
    assert meta_path(first).read_text(encoding="utf-8") == meta_path(second).read_text(
        encoding="utf-8")
