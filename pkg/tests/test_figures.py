from __future__ import annotations

import csv

import numpy as np
import pytest
from PIL import Image

from app.figures import (
    loss_curve_pgm,
    read_loss_log,
    smooth,
    spectrogram_image,
    spectrogram_pgm,
    write_loss_summary,
)
from app.trainer import LOSS_COLUMNS


def write_log(path, totals):
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_COLUMNS)
        for i, total in enumerate(totals, start=1):
            writer.writerow([i * 10] + [total] + [total / 6.0] * 6)
    return path


def test_silence_is_black(tmp_path, make_sine):
    path = spectrogram_pgm(make_sine(440.0, 0.5, amplitude=0.0), tmp_path / "silence.pgm")
    assert path.read_bytes().startswith(b"P5")
    with Image.open(path) as img:
        assert img.mode == "L"
        assert img.size == (32, 1025)
        assert not np.asarray(img).any()


def test_sine_lights_its_bin(make_sine):
    image = spectrogram_image(make_sine(1000.0, 1.0))
    assert image.shape == (1025, 63)
    column = image[:, 30]
    assert int(np.argmax(column)) == 1024 - 128
    assert column.max() >= 254
    assert column[:400].max() == 0


def test_smooth_keeps_constants_and_length():
    np.testing.assert_allclose(smooth(np.full(25, 3.0)), 3.0)
    assert smooth(np.arange(3.0), window=10).shape == (3,)


def test_loss_summary(tmp_path):
    log = read_loss_log(write_log(tmp_path / "loss.csv", [6.0, 3.0, 6.0, 3.0, 6.0]))
    np.testing.assert_array_equal(log.steps, [10, 20, 30, 40, 50])
    path = write_loss_summary(log, tmp_path / "figs", window=2)
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0][:3] == ["step", "total", "smoothed"]
    assert rows[0][-1] == "smoothed_L64"
    assert len(rows) == 6
    assert float(rows[1][1]) == 6.0
    assert 3.0 < float(rows[3][2]) < 6.0


def test_loss_curve_image(tmp_path):
    log = read_loss_log(write_log(tmp_path / "loss.csv", np.geomspace(10.0, 0.1, 40)))
    path = loss_curve_pgm(log, tmp_path / "curve.pgm")
    with Image.open(path) as img:
        assert img.size == (640, 360)
        pixels = np.asarray(img)
    assert pixels.max() == 255
    assert pixels[:, 0].any() and pixels[:, -1].any()


def test_bad_loss_logs(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n", encoding="utf-8")
    with pytest.raises(ValueError, match="not a loss log"):
        read_loss_log(path)
    path.write_text(",".join(LOSS_COLUMNS) + "\n", encoding="utf-8")
    with pytest.raises(ValueError, match="no rows"):
        read_loss_log(path)
