from __future__ import annotations

import numpy as np
import pytest

from app.features import (
    FeatureError,
    Note,
    compute_dataset_stats,
    extract_features,
    f0_from_notes,
    hold_unvoiced,
    hz_to_midi,
    midi_to_hz,
    parse_notes,
    precondition,
    read_sidecar,
    sidecar_path,
    suggest_octave_shift,
    track_f0,
    write_sidecar,
)
from app.models import (
    AudioBuffer,
    ConditioningFeatures,
    DatasetStats,
    FrameSeries,
    PreconditionOptions,
)


def features(f0, loudness, confidence=1.0) -> ConditioningFeatures:
    f0 = np.asarray(f0, dtype=float)
    return ConditioningFeatures(
        f0_hz=FrameSeries(frames=f0),
        f0_confidence=FrameSeries(frames=np.broadcast_to(confidence, f0.shape).copy()),
        loudness_db=FrameSeries(frames=np.broadcast_to(loudness, f0.shape).copy()),
    )


def test_midi_conversions():
    assert float(hz_to_midi(440.0)) == pytest.approx(69.0)
    assert float(midi_to_hz(57.0)) == pytest.approx(220.0)


def test_track_f0_finds_a_sine(make_sine):
    f0, conf = track_f0(make_sine(220.0, 1.0, amplitude=0.5))
    assert f0.frame_rate == 250
    assert f0.num_frames == 250
    np.testing.assert_allclose(f0.values[10:-10], 220.0, rtol=0.01)
    assert conf.values[10:-10].min() > 0.9


def test_track_f0_of_silence(make_sine):
    f0, conf = track_f0(make_sine(220.0, 0.5, amplitude=0.0))
    assert not conf.values.any()
    assert not f0.values.any()


def test_hold_unvoiced():
    held = hold_unvoiced(np.array([100.0, 7.0, 9.0, 200.0]), np.array([1.0, 0.1, 0.0, 0.9]))
    np.testing.assert_array_equal(held, [100.0, 100.0, 100.0, 200.0])
    leading = hold_unvoiced(np.array([5.0, 300.0]), np.array([0.0, 1.0]))
    np.testing.assert_array_equal(leading, [300.0, 300.0])


def test_sidecar_round_trip(tmp_path, rng):
    f = features(rng.uniform(100, 400, 50), rng.uniform(-80, -10, 50), rng.uniform(0, 1, 50))
    path = tmp_path / "take.f0.txt"
    write_sidecar(path, f)
    back = read_sidecar(path)
    np.testing.assert_allclose(back.f0_hz.values, f.f0_hz.values, rtol=1e-8)
    np.testing.assert_allclose(back.f0_confidence.values, f.f0_confidence.values, atol=1e-9)
    np.testing.assert_allclose(back.loudness_db.values, f.loudness_db.values, rtol=1e-8)


def test_bad_sidecar(tmp_path):
    path = tmp_path / "bad.f0.txt"
    path.write_text("0.0 220 0.5\n", encoding="utf-8")
    with pytest.raises(FeatureError, match="4 columns"):
        read_sidecar(path)
    path.write_text("0.0 220 1.5 -20\n", encoding="utf-8")
    with pytest.raises(FeatureError, match="confidence"):
        read_sidecar(path)


def test_extract_features_prefers_sidecar(tmp_path, make_sine):
    audio = make_sine(220.0, 0.4)
    wav = tmp_path / "take.wav"
    write_sidecar(sidecar_path(wav), features(np.full(100, 123.0), -30.0))
    f = extract_features(audio, sidecar=sidecar_path(wav))
    assert f.num_frames == 100
    assert np.all(f.f0_hz.values == 123.0)
    tracked = extract_features(audio, with_mfcc=True)
    assert tracked.mfcc is not None and tracked.mfcc.dim == 30
    assert tracked.num_frames == 100


def test_default_options_are_the_identity(rng):
    f = features(rng.uniform(100, 400, 80), rng.uniform(-80, -10, 80), rng.uniform(0, 1, 80))
    out = precondition(f, PreconditionOptions())
    assert out.f0_hz.frames.tobytes() == f.f0_hz.frames.tobytes()
    assert out.loudness_db.frames.tobytes() == f.loudness_db.frames.tobytes()


def test_octave_shift_moves_mean_pitch_by_twelve():
    f = features(np.full(200, float(midi_to_hz(51.30))), -30.0)
    before = compute_dataset_stats([f]).mean_midi_pitch
    shifted = precondition(f, PreconditionOptions(octave_shift=1))
    after = compute_dataset_stats([shifted]).mean_midi_pitch
    assert before == pytest.approx(51.30)
    assert after == pytest.approx(63.30)


def test_autotune_snaps_to_semitones():
    f = features(np.full(10, float(midi_to_hz(60.3))), -30.0)
    full = precondition(f, PreconditionOptions(autotune=1.0))
    np.testing.assert_allclose(hz_to_midi(full.f0_hz.values), 60.0)
    half = precondition(f, PreconditionOptions(autotune=0.5))
    np.testing.assert_allclose(hz_to_midi(half.f0_hz.values), 60.15)


def test_statistics_matching(rng):
    f = features(np.full(2000, 220.0), rng.normal(-40.0, 5.0, 2000))
    stats = DatasetStats(mean_midi_pitch=60.0, mean_loudness_db=-20.0, std_loudness_db=2.0)
    out = precondition(f, PreconditionOptions(use_statistics=True), stats).loudness_db.values
    assert out.mean() == pytest.approx(-20.0, abs=1e-6)
    assert out.std() == pytest.approx(2.0, rel=1e-6)
    with pytest.raises(FeatureError):
        precondition(f, PreconditionOptions(use_statistics=True))


def test_masking_quiets_weak_frames():
    conf = np.array([1.0, 1.0, 0.1, 1.0, 1.0])
    f = features(np.full(5, 220.0), -30.0, conf)
    out = precondition(f, PreconditionOptions(mask_threshold=1.0, quiet=20.0)).loudness_db.values
    np.testing.assert_allclose(out, [-30.0, -30.0, -50.0, -30.0, -30.0])


def test_loudness_never_drops_below_floor():
    f = features(np.full(4, 220.0), -115.0)
    out = precondition(f, PreconditionOptions(loudness_shift=-10.0)).loudness_db.values
    assert np.all(out == -120.0)


def test_stats_and_octave_suggestion():
    f = features([220.0, 220.0, 440.0, 0.0], [-20.0, -30.0, -120.0, -120.0], [1.0, 1.0, 0.5, 0.0])
    stats = compute_dataset_stats([f])
    assert stats.mean_midi_pitch == pytest.approx(57.0)
    assert stats.mean_loudness_db == pytest.approx(-25.0)
    assert stats.std_loudness_db == pytest.approx(5.0)
    melody = DatasetStats(mean_midi_pitch=51.3, mean_loudness_db=-20.0, std_loudness_db=1.0)
    assert suggest_octave_shift(melody, stats) == 0
    assert suggest_octave_shift(melody, stats.model_copy(update={"mean_midi_pitch": 63.0})) == 1
    assert suggest_octave_shift(melody, stats.model_copy(update={"mean_midi_pitch": 40.0})) == -1


def test_stats_need_voiced_frames():
    with pytest.raises(FeatureError, match="voiced"):
        compute_dataset_stats([features(np.full(5, 220.0), -20.0, 0.2)])
    with pytest.raises(FeatureError):
        compute_dataset_stats([])


def test_parse_notes(tmp_path):
    path = tmp_path / "tune.txt"
    path.write_text("# melody\n0.0 0.5 69\n\n0.6 1.0 57  # low A\n", encoding="utf-8")
    notes = parse_notes(path)
    assert [n.midi for n in notes] == [69.0, 57.0]
    path.write_text("0.0 0.5 69\n0.5 0.4 60\n", encoding="utf-8")
    with pytest.raises(FeatureError, match=":2:"):
        parse_notes(path)


def test_f0_from_notes(tmp_path):
    path = tmp_path / "tune.txt"
    path.write_text("0.0 0.5 69\n0.6 1.0 57\n", encoding="utf-8")
    f0, conf = f0_from_notes(parse_notes(path), 250)
    assert f0.values[0] == pytest.approx(440.0)
    assert conf.values[130] == 0.0
    assert f0.values[130] == pytest.approx(440.0)
    assert f0.values[200] == pytest.approx(220.0)
    wobble, _ = f0_from_notes(parse_notes(path), 250, vibrato_cents=50.0)
    assert wobble.values[:125].max() > 440.0 > wobble.values[:125].min()
    with pytest.raises(FeatureError):
        f0_from_notes([Note(start_s=5.0, end_s=6.0, midi=60.0)], 250)


def test_white_noise_is_not_confident(rng):
    _, conf = track_f0(AudioBuffer(samples=rng.uniform(-0.5, 0.5, 16000)))
    assert conf.values.mean() < 0.3


def test_feature_frame_counts(make_sine):
    f = extract_features(make_sine(330.0, 2.0, amplitude=0.3), with_mfcc=True)
    assert f.num_frames == 500
    assert f.loudness_db.num_frames == 500
    assert f.mfcc.num_frames == 250
    assert extract_features(make_sine(330.0, 0.5)).mfcc is None


def test_pitch_statistics():
    assert compute_dataset_stats([features(np.full(50, 440.0), -20.0)]).mean_midi_pitch == 69.0
    split = features(np.r_[np.full(50, 220.0), np.full(50, 880.0)], -20.0)
    assert compute_dataset_stats([split]).mean_midi_pitch == pytest.approx(69.0)


def test_stats_match_a_brute_force_pass(rng):
    corpus = [features(rng.uniform(80, 900, 300), rng.uniform(-119, -5, 300),
                       rng.uniform(0, 1, 300)) for _ in range(4)]
    pitches, louds = [], []
    for f in corpus:
        for hz, c, ld in zip(f.f0_hz.values, f.f0_confidence.values, f.loudness_db.values):
            if c > 0.8:
                pitches.append(69.0 + 12.0 * np.log2(hz / 440.0))
            louds.append(ld)
    stats = compute_dataset_stats(corpus)
    assert stats.mean_midi_pitch == pytest.approx(np.mean(pitches), abs=1e-9)
    assert stats.mean_loudness_db == pytest.approx(np.mean(louds), abs=1e-9)
    assert stats.std_loudness_db == pytest.approx(np.std(louds), abs=1e-9)


def test_autotune_pins_a_drifting_a4():
    cents = 30.0 * np.sin(np.linspace(0, 6 * np.pi, 200))
    f = features(440.0 * 2.0 ** (cents / 1200.0), -20.0)
    out = precondition(f, PreconditionOptions(autotune=1.0)).f0_hz.values
    assert np.all(out == 440.0)


def test_autotune_twice_equals_once(rng):
    f = features(rng.uniform(90.0, 900.0, 120), -25.0)
    opts = PreconditionOptions(autotune=1.0)
    once = precondition(f, opts)
    twice = precondition(once, opts)
    np.testing.assert_allclose(twice.f0_hz.values, once.f0_hz.values, rtol=0, atol=1e-9)


def test_masking_leaves_f0_alone(rng):
    f = features(rng.uniform(80.0, 600.0, 200), rng.uniform(-90.0, -5.0, 200),
                 rng.uniform(0.0, 1.0, 200))
    out = precondition(f, PreconditionOptions(mask_threshold=1.0, quiet=20.0))
    assert out.f0_hz.frames.tobytes() == f.f0_hz.frames.tobytes()
    assert not np.array_equal(out.loudness_db.values, f.loudness_db.values)


def test_stats_ignore_corpus_order(rng):
    corpus = [features(rng.uniform(80, 900, 150), rng.uniform(-110, -5, 150),
                       rng.uniform(0, 1, 150)) for _ in range(5)]
    stats = compute_dataset_stats(corpus)
    shuffled = compute_dataset_stats([corpus[i] for i in rng.permutation(len(corpus))])
    assert shuffled.mean_midi_pitch == pytest.approx(stats.mean_midi_pitch, rel=1e-12)
    assert shuffled.mean_loudness_db == pytest.approx(stats.mean_loudness_db, rel=1e-12)
    assert shuffled.std_loudness_db == pytest.approx(stats.std_loudness_db, rel=1e-12)


def test_masked_frames_stop_at_the_floor():
    conf = np.array([1.0, 1.0, 0.1, 1.0])
    f = features(np.full(4, 220.0), [-60.0, -60.0, -110.0, -60.0], conf)
    out = precondition(f, PreconditionOptions(mask_threshold=1.0, quiet=20.0)).loudness_db.values
    np.testing.assert_allclose(out, [-60.0, -60.0, -120.0, -60.0])
