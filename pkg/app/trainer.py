"""Dataset chunking and the training loop: decode -> render -> multi-scale loss -> Adam."""
from __future__ import annotations

import csv
import logging
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import psutil
from pydantic import BaseModel, ConfigDict, ValidationError

from app.applog import append_app_log, append_run_log
from app.audio_io import list_audio_files, read_wav
from app.autodiff import Tape, backward
from app.config import settings
from app.decoder import REVERB_PARAM, check_params, decode_batch, init_params
from app.features import (
    compute_dataset_stats,
    extract_features,
    read_sidecar,
    sidecar_path,
)
from app.models import (
    AudioBuffer,
    Checkpoint,
    ConditioningFeatures,
    Dataset,
    Example,
    FrameSeries,
    TrainConfig,
)
from app.signal_core import AudioError, mfcc
from app.store import is_prepared, load_dataset, save_checkpoint
from app.synth import (
    LOSS_FFT_SIZES,
    NOISE_HOP,
    LossReport,
    render_batch,
    spectral_loss_batch,
    white_noise,
)
from app.version import APP_VERSION

_log = logging.getLogger("app.trainer")

CHUNK_HOP_SECONDS = 1.0
MAX_SEGMENT_SECONDS = 300.0
LOSS_LOG = "loss.csv"
RUN_LOG = "train.log"
CHECKPOINT_FILE = "model.ckpt"
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LR_DECAY_STEPS = 1000


class DatasetError(RuntimeError):
    """No usable training data."""


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite; the last good checkpoint is left in place."""

    def __init__(self, step: int, checkpoint: Path | None):
        self.step = step
        self.checkpoint = checkpoint
        where = f"; last good checkpoint {checkpoint}" if checkpoint else ""
        super().__init__(f"loss diverged at step {step}{where}")


# ------------------------------------------------------------------ #
# Dataset                                                             #
# ------------------------------------------------------------------ #

def _slice_features(f: ConditioningFeatures, start: int, count: int, source: Path
                    ) -> ConditioningFeatures:
    if f.num_frames < start + count:
        raise DatasetError(f"{source}: sidecar has {f.num_frames} frames, need {start + count}")

    def cut(s: FrameSeries) -> FrameSeries:
        return FrameSeries(frames=s.frames[start: start + count], frame_rate=s.frame_rate)

    return ConditioningFeatures(
        f0_hz=cut(f.f0_hz),
        f0_confidence=cut(f.f0_confidence),
        loudness_db=cut(f.loudness_db),
    )


def chunk_starts(num_samples: int, chunk: int, hop: int) -> list[int]:
    """Start offsets of every full chunk; none when the signal is shorter than one chunk."""
    if num_samples < chunk:
        return []
    return list(range(0, num_samples - chunk + 1, hop))


def _file_examples(path: Path, example_seconds: float, with_mfcc: bool) -> list[Example]:
    try:
        audio = read_wav(path)
    except AudioError as e:
        append_app_log(f"skipping {path.name}: {e}", "warn")
        return []
    sr = audio.sample_rate
    chunk = int(round(example_seconds * sr))
    hop = int(CHUNK_HOP_SECONDS * sr)
    segment = int(MAX_SEGMENT_SECONDS * sr)
    side = sidecar_path(path)
    file_features = read_sidecar(side) if side.exists() else None
    examples: list[Example] = []
    for seg_start in range(0, len(audio), segment):
        seg_len = min(segment, len(audio) - seg_start)
        starts = chunk_starts(seg_len, chunk, hop)
        if not starts:
            append_app_log(
                f"dropped {path.name} @ {seg_start / sr:.1f}s: {seg_len / sr:.2f}s is shorter"
                f" than one {example_seconds:g}s example", "warn",
            )
            continue
        for start in starts:
            offset = seg_start + start
            clip = AudioBuffer(samples=audio.samples[offset: offset + chunk], sample_rate=sr)
            if file_features is None:
                f = extract_features(clip, with_mfcc=with_mfcc)
            else:
                f = _slice_features(file_features, offset // NOISE_HOP, chunk // NOISE_HOP, side)
                if with_mfcc:
                    f = f.model_copy(update={"mfcc": mfcc(clip)})
            examples.append(Example(audio=clip, features=f, source=f"{path.stem}@{offset / sr:g}s"))
    _log.debug("%s: %d examples", path.name, len(examples))
    return examples


def make_dataset(audio_dirs: Path | Sequence[Path], example_seconds: float = 4.0,
                 with_mfcc: bool = False, workers: int | None = None) -> Dataset:
    """Chunk every audio file into example_seconds windows (1 s hop) with per-chunk features.

    Files are taken in sorted order per directory; extraction runs file-parallel but the
    example order does not depend on the worker count.
    """
    dirs = [audio_dirs] if isinstance(audio_dirs, Path) else list(audio_dirs)
    files: list[Path] = []
    for d in dirs:
        if not d.is_dir():
            raise DatasetError(f"{d} is not a directory")
        found = list_audio_files(d)
        if not found:
            raise DatasetError(f"no audio files in {d}")
        files.extend(found)
    with ThreadPoolExecutor(max_workers=workers or settings.workers) as pool:
        per_file = list(pool.map(lambda p: _file_examples(p, example_seconds, with_mfcc), files))
    examples = [e for chunk in per_file for e in chunk]
    if not examples:
        raise DatasetError(
            f"no decodable audio of at least {example_seconds:g}s in {', '.join(map(str, dirs))}"
        )
    stats = compute_dataset_stats([e.features for e in examples])
    append_app_log(
        f"dataset: {len(files)} files, {len(examples)} examples,"
        f" mean MIDI {stats.mean_midi_pitch:.2f},"
        f" loudness {stats.mean_loudness_db:.1f} +- {stats.std_loudness_db:.1f} dB"
    )
    return Dataset(examples=examples, stats=stats)


def open_dataset(directory: Path, example_seconds: float = 4.0, with_mfcc: bool = False
                 ) -> Dataset:
    """A prepared dataset directory as written by save_dataset, or raw audio to chunk now."""
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    if is_prepared(directory):
        try:
            return load_dataset(directory)
        except (FileNotFoundError, ValidationError) as e:
            raise DatasetError(f"cannot load dataset {directory}: {e}") from e
    return make_dataset(directory, example_seconds, with_mfcc)


# ------------------------------------------------------------------ #
# Optimizer                                                           #
# ------------------------------------------------------------------ #

class Adam:
    """Adam with exponential learning-rate decay and global-norm gradient clipping."""

    def __init__(self, learning_rate: float, decay: float, clip_norm: float,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.learning_rate = learning_rate
        self.decay = decay
        self.clip_norm = clip_norm
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def lr_at(self, step: int) -> float:
        return self.learning_rate * self.decay ** (step / LR_DECAY_STEPS)

    def clip(self, grads: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], float]:
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                                 for g in grads.values())))
        scale = self.clip_norm / norm if norm > self.clip_norm else 1.0
        return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm

    def update(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
               m: dict[str, np.ndarray], v: dict[str, np.ndarray], step: int) -> float:
        """In-place update of params and moments for step >= 1; returns the pre-clip norm."""
        clipped, norm = self.clip(grads)
        lr = self.lr_at(step)
        c1 = 1.0 - self.beta1 ** step
        c2 = 1.0 - self.beta2 ** step
        for name, g in clipped.items():
            m[name] = (self.beta1 * m[name] + (1.0 - self.beta1) * g).astype(np.float32)
            v[name] = (self.beta2 * v[name] + (1.0 - self.beta2) * g * g).astype(np.float32)
            step_size = lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + self.eps)
            params[name] = (params[name] - step_size).astype(np.float32)
        return norm


# ------------------------------------------------------------------ #
# Training                                                            #
# ------------------------------------------------------------------ #

LOSS_COLUMNS = ["step", "total"] + [f"L{s}" for s in LOSS_FFT_SIZES]


class Batch(BaseModel):
    """Stacked [B, T] conditioning, optional [B, Tm, C] MFCC and [B, T*64] target audio."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    f0: np.ndarray
    loudness: np.ndarray
    mfcc: np.ndarray | None = None
    target: np.ndarray
    noise_seed: int


def sample_batch(dataset: Dataset, config: TrainConfig, step: int) -> Batch:
    """Batch indices and noise seed derive from (seed, step) only."""
    rng = np.random.default_rng([config.seed, step])
    picks = [dataset.examples[i] for i in rng.integers(0, len(dataset), size=config.batch_size)]
    noise_seed = int(rng.integers(0, 2**31 - 1))
    n_frames = min(
        min(e.features.num_frames for e in picks),
        min(len(e.audio) for e in picks) // NOISE_HOP,
    )
    mfcc_frames = None
    if config.model.use_z:
        if any(e.features.mfcc is None for e in picks):
            raise DatasetError(
                "model uses MFCC but the dataset has none (prepare with --with-mfcc)")
        n_mfcc = min(e.features.mfcc.num_frames for e in picks)
        mfcc_frames = np.stack([e.features.mfcc.frames[:n_mfcc] for e in picks])
    return Batch(
        f0=np.stack([e.features.f0_hz.values[:n_frames] for e in picks]),
        loudness=np.stack([e.features.loudness_db.values[:n_frames] for e in picks]),
        mfcc=mfcc_frames,
        target=np.stack([e.audio.samples[: n_frames * NOISE_HOP] for e in picks]),
        noise_seed=noise_seed,
    )


def loss_step(params: Mapping[str, np.ndarray], batch: Batch, config: TrainConfig,
              dtype: type = np.float32, with_grads: bool = True
              ) -> tuple[LossReport, dict[str, np.ndarray]]:
    """One forward (and backward) pass of decode -> render -> loss on a fresh tape."""
    tape = Tape(dtype)
    tparams = {name: tape.param(name, value) for name, value in params.items()}
    out = decode_batch(tape, tparams, batch.f0, batch.loudness, config.model, batch.mfcc)
    noise = white_noise(batch.target.shape, batch.noise_seed)
    mix, _, _ = render_batch(out.amplitude, out.harm_distribution, out.noise_magnitudes,
                             batch.f0, noise, tparams.get(REVERB_PARAM))
    total, per_fft = spectral_loss_batch(batch.target, mix)
    terms = {size: float(t.value) for size, t in per_fft.items()}
    if not all(np.isfinite(v) for v in terms.values()):
        report = LossReport.model_construct(total=float("nan"), per_fft=terms)
        return report, {}
    report = LossReport.from_terms(terms)
    return report, backward(tape, total) if with_grads else {}


def _write_loss_rows(path: Path, rows: list[list[str]], fresh: bool) -> None:
    with path.open("w" if fresh else "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(LOSS_COLUMNS)
        writer.writerows(rows)


def _truncate_loss_log(path: Path, last_step: int) -> None:
    """Drop rows past last_step so a resumed run continues the log cleanly."""
    if not path.exists():
        _write_loss_rows(path, [], fresh=True)
        return
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    kept = [r for r in rows[1:] if r and int(r[0]) <= last_step]
    _write_loss_rows(path, kept, fresh=True)


def _loss_row(step: int, report: LossReport) -> list[str]:
    return [str(step), repr(report.total)] + [repr(report.per_fft[s]) for s in LOSS_FFT_SIZES]


def _rss_mib() -> float:
    return psutil.Process().memory_info().rss / (1024 * 1024)


def train(config: TrainConfig, dataset: Dataset, out_dir: Path,
          resume: Checkpoint | None = None,
          on_step: Callable[[int, LossReport], None] | None = None) -> Checkpoint:
    """Optimize from scratch (or from `resume`) up to config.steps; returns the final checkpoint.

    Writes loss.csv (step 1, every log_every steps and the last step), train.log, and
    model.ckpt every checkpoint_every steps and at the end.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    run_log = out_dir / RUN_LOG
    loss_path = out_dir / LOSS_LOG
    ckpt_path = out_dir / CHECKPOINT_FILE

    if resume is not None:
        check_params(resume.params, config.model)
        params = {k: np.array(p, dtype=np.float32) for k, p in resume.params.items()}
        m = {k: np.array(resume.adam_m.get(k, np.zeros_like(p)), dtype=np.float32)
             for k, p in params.items()}
        v = {k: np.array(resume.adam_v.get(k, np.zeros_like(p)), dtype=np.float32)
             for k, p in params.items()}
        start = resume.step
        _truncate_loss_log(loss_path, start)
    else:
        raw = init_params(config.model, np.random.default_rng(config.seed))
        params = {k: val.astype(np.float32) for k, val in raw.items()}
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        start = 0
        _write_loss_rows(loss_path, [], fresh=True)

    append_run_log(
        run_log,
        f"train v{APP_VERSION}: {len(dataset)} examples, steps {start + 1}..{config.steps},"
        f" batch {config.batch_size}, {config.model.n_harmonics} harmonics,"
        f" {config.model.n_noise} noise bands, z={'on' if config.model.use_z else 'off'}",
    )
    adam = Adam(config.learning_rate, config.lr_decay, config.clip_norm)
    last_saved: Path | None = ckpt_path if ckpt_path.exists() and resume is not None else None
    pending: list[list[str]] = []

    def checkpoint(step: int) -> Checkpoint:
        return Checkpoint(params=dict(params), step=step, config=config, stats=dataset.stats,
                          adam_m=dict(m), adam_v=dict(v))

    step = start
    for step in range(start + 1, config.steps + 1):
        batch = sample_batch(dataset, config, step)
        report, grads = loss_step(params, batch, config)
        if not np.isfinite(report.total):
            _write_loss_rows(loss_path, pending, fresh=False)
            append_run_log(run_log, f"loss diverged at step {step} (NaN/Inf); stopping", "error")
            raise TrainingDiverged(step, last_saved)
        norm = adam.update(params, grads, m, v, step)
        if on_step is not None:
            on_step(step, report)
        if step == 1 or step % config.log_every == 0 or step == config.steps:
            pending.append(_loss_row(step, report))
            append_run_log(
                run_log,
                f"step {step}/{config.steps} loss {report.total:.4f} lr {adam.lr_at(step):.3g}"
                f" grad_norm {norm:.3g} rss {_rss_mib():.0f} MiB",
            )
        if step % config.checkpoint_every == 0 or step == config.steps:
            _write_loss_rows(loss_path, pending, fresh=False)
            pending = []
            save_checkpoint(checkpoint(step), ckpt_path)
            last_saved = ckpt_path
            append_run_log(run_log, f"checkpoint step {step} -> {ckpt_path.name}")
    _write_loss_rows(loss_path, pending, fresh=False)
    return checkpoint(step)
