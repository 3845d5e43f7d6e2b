from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from app.config import settings
from app.models import SAMPLE_RATE, AudioBuffer


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    """Point data and log directories at a per-test temp dir and reset env-driven settings."""
    data = tmp_path / "data"
    logs = data / "logs"
    logs.mkdir(parents=True)
    monkeypatch.setattr(settings, "data_dir", data)
    monkeypatch.setattr(settings, "logs_dir", logs)
    monkeypatch.setattr(settings, "seed", None)
    monkeypatch.setattr(settings, "debug", False)
    return data


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def sine(freq: float, seconds: float, amplitude: float = 1.0,
         sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioBuffer(samples=amplitude * np.sin(2 * np.pi * freq * t), sample_rate=sample_rate)


@pytest.fixture
def make_sine():
    return sine
