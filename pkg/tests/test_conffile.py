from __future__ import annotations

from pathlib import Path

import pytest

from app.config import settings
from app.conffile import (
    ConfigFileError,
    load_train_config,
    read_stats,
    render_config,
    write_resolved,
    write_stats,
)
from app.models import DatasetStats

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def test_shipped_singing_config():
    config, entries = load_train_config(CONFIGS / "singing.conf")
    assert config.model.n_harmonics == 60
    assert config.model.n_noise == 65
    assert config.model.use_reverb and not config.model.use_z
    assert config.batch_size == 16
    assert config.steps == 40000
    assert entries["n_noise"].line == 3


def test_latent_config_inherits_everything_else():
    base, _ = load_train_config(CONFIGS / "singing.conf")
    latent, entries = load_train_config(CONFIGS / "singing_z.conf")
    assert latent.model.use_z
    assert latent.model_copy(update={"model": base.model}) == base
    assert latent.model.model_copy(update={"use_z": False}) == base.model
    assert entries["use_z"].path.name == "singing_z.conf"
    assert entries["n_harmonics"].path.name == "singing.conf"


@pytest.mark.parametrize("path", sorted((CONFIGS / "sweep").glob("*.conf")), ids=lambda p: p.stem)
def test_sweep_configs_parse(path):
    config, _ = load_train_config(path)
    h, n = path.stem.split("_")
    assert config.model.n_harmonics == int(h[1:])
    assert config.model.n_noise == int(n[1:])
    assert config.steps == 50


def test_sweep_covers_the_grid():
    names = {p.stem for p in (CONFIGS / "sweep").glob("*.conf")}
    assert names == {f"h{h}_n{n}" for h in (20, 60, 100) for n in (10, 35, 65)}


def test_later_keys_override_includes(tmp_path):
    write(tmp_path / "base.conf", "steps = 10\nbatch_size = 2\n")
    child = write(tmp_path / "sub" / "child.conf",
                  "steps = 5\ninclude ../base.conf\nbatch_size = 3\n")
    config, _ = load_train_config(child)
    assert config.steps == 10
    assert config.batch_size == 3


def test_include_cycle(tmp_path):
    write(tmp_path / "a.conf", "include b.conf\n")
    write(tmp_path / "b.conf", "steps = 3\ninclude a.conf\n")
    with pytest.raises(ConfigFileError, match="include cycle: a.conf -> b.conf -> a.conf") as info:
        load_train_config(tmp_path / "a.conf")
    assert info.value.line == 2


def test_missing_include(tmp_path):
    path = write(tmp_path / "a.conf", "\ninclude nowhere.conf\n")
    with pytest.raises(ConfigFileError, match=r"a\.conf:2: cannot include"):
        load_train_config(path)


def test_unknown_key_reports_file_and_line(tmp_path):
    path = write(tmp_path / "bad.conf", "# comment\nsteps = 3\nn_harmonicz = 4\n")
    with pytest.raises(ConfigFileError, match=r"bad\.conf:3: unknown key 'n_harmonicz'"):
        load_train_config(path)


def test_malformed_line(tmp_path):
    path = write(tmp_path / "bad.conf", "steps 3\n")
    with pytest.raises(ConfigFileError, match="key = value"):
        load_train_config(path)


def test_invalid_value_points_at_its_line(tmp_path):
    write(tmp_path / "base.conf", "batch_size = 4\nn_harmonics = 400\n")
    path = write(tmp_path / "top.conf", "include base.conf\n")
    with pytest.raises(ConfigFileError, match=r"base\.conf:2: n_harmonics") as info:
        load_train_config(path)
    assert info.value.path.name == "base.conf"


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigFileError, match="cannot read"):
        load_train_config(tmp_path / "absent.conf")


def test_seed_override(monkeypatch):
    monkeypatch.setattr(settings, "seed", 42)
    config, _ = load_train_config(CONFIGS / "desk.conf")
    assert config.seed == 42


def test_resolved_config_reloads_identically(tmp_path):
    config, _ = load_train_config(CONFIGS / "desk.conf")
    path = write_resolved(config, tmp_path / "run")
    text = path.read_text(encoding="utf-8")
    assert "use_reverb = true" in text
    assert text == render_config(config)
    again, _ = load_train_config(path)
    assert again == config


def test_stats_file_round_trip(tmp_path):
    stats = DatasetStats(mean_midi_pitch=57.123456789, mean_loudness_db=-31.5, std_loudness_db=6.25)
    write_stats(tmp_path / "stats.txt", stats)
    assert read_stats(tmp_path / "stats.txt") == stats
