"""Checkpoints (binary tensors plus a JSON sidecar) and prepared dataset directories."""
from __future__ import annotations

import json
import logging
import os
import re
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.audio_io import read_wav, write_wav
from app.autodiff import ShapeError
from app.conffile import read_stats, write_stats
from app.decoder import check_params
from app.features import (
    mfcc_sidecar_path,
    read_mfcc_sidecar,
    read_sidecar,
    sidecar_path,
    write_mfcc_sidecar,
    write_sidecar,
)
from app.models import (
    Checkpoint,
    ConditioningFeatures,
    Dataset,
    DatasetStats,
    Example,
    ModelConfig,
    TrainConfig,
)
from app.version import APP_VERSION, CHECKPOINT_VERSION

_log = logging.getLogger("app.store")

MAGIC = b"SMSD"
ADAM_M_PREFIX = "adam/m/"
ADAM_V_PREFIX = "adam/v/"
CHUNKS_DIR = "chunks"
STATS_FILE = "stats.txt"


class CheckpointError(ValueError):
    """Unreadable, truncated or mismatched checkpoint."""


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


# ------------------------------------------------------------------ #
# Tensor file                                                         #
# ------------------------------------------------------------------ #

def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Little-endian: magic, version u32, count u32, then per tensor (sorted by name)
    name length u16, UTF-8 name, rank u8, dims u32 x rank, float32 payload."""
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: Path | str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (needs {n} more)")
        chunk = self.data[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(data: bytes, source: Path | str = "<bytes>") -> dict[str, np.ndarray]:
    r = _Reader(data, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{source}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{source}: tensor name is not UTF-8") from e
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes")
    return tensors


# ------------------------------------------------------------------ #
# Checkpoints                                                         #
# ------------------------------------------------------------------ #

def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    """Write the tensor file and its `<path>.json` sidecar, each via temp file and rename."""
    tensors: dict[str, np.ndarray] = dict(ckpt.params)
    tensors.update({ADAM_M_PREFIX + k: v for k, v in ckpt.adam_m.items()})
    tensors.update({ADAM_V_PREFIX + k: v for k, v in ckpt.adam_v.items()})
    meta = {
        "step": ckpt.step,
        "config": ckpt.config.model_dump(),
        "stats": ckpt.stats.model_dump() if ckpt.stats else None,
        "app_version": APP_VERSION,
        "checkpoint_version": CHECKPOINT_VERSION,
    }
    _atomic_write(meta_path(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    _atomic_write(path, encode_tensors(tensors))
    _log.debug("saved checkpoint %s at step %d", path, ckpt.step)


def load_checkpoint(path: Path, model: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; shapes are checked against `model` (default: the saved config)."""
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror or e}") from e
    tensors = decode_tensors(data, path)
    try:
        meta = json.loads(meta_path(path).read_text(encoding="utf-8"))
        config = TrainConfig.model_validate(meta["config"])
        stats = DatasetStats.model_validate(meta["stats"]) if meta.get("stats") else None
        step = int(meta["step"])
    except (OSError, ValueError, KeyError, ValidationError) as e:
        raise CheckpointError(f"cannot read checkpoint metadata {meta_path(path)}: {e}") from e
    params = {k: v for k, v in tensors.items()
              if not k.startswith((ADAM_M_PREFIX, ADAM_V_PREFIX))}
    adam_m = {k[len(ADAM_M_PREFIX):]: v for k, v in tensors.items() if k.startswith(ADAM_M_PREFIX)}
    adam_v = {k[len(ADAM_V_PREFIX):]: v for k, v in tensors.items() if k.startswith(ADAM_V_PREFIX)}
    try:
        check_params(params, model or config.model)
    except ShapeError as e:
        raise CheckpointError(f"{path}: {e}") from e
    return Checkpoint(params=params, step=step, config=config, stats=stats,
                      adam_m=adam_m, adam_v=adam_v)


# ------------------------------------------------------------------ #
# Prepared datasets                                                   #
# ------------------------------------------------------------------ #

def _chunk_name(index: int, example: Example) -> str:
    stem = re.sub(r"[^\w-]+", "_", example.source).strip("_") or "chunk"
    return f"{index:05d}_{stem}"


def save_dataset(dataset: Dataset, out_dir: Path) -> list[Path]:
    """chunks/NNNNN_<source>.wav with .f0.txt (and .mfcc.txt) sidecars, plus stats.txt."""
    chunks = out_dir / CHUNKS_DIR
    chunks.mkdir(parents=True, exist_ok=True)
    for stale in chunks.iterdir():
        if stale.is_file():
            stale.unlink()
    written: list[Path] = []
    for i, example in enumerate(dataset.examples):
        wav = chunks / f"{_chunk_name(i, example)}.wav"
        write_wav(wav, example.audio)
        write_sidecar(sidecar_path(wav), example.features)
        if example.features.mfcc is not None:
            write_mfcc_sidecar(mfcc_sidecar_path(wav), example.features.mfcc)
        written.append(wav)
    write_stats(out_dir / STATS_FILE, dataset.stats)
    return written


def is_prepared(directory: Path) -> bool:
    return (directory / STATS_FILE).is_file() and (directory / CHUNKS_DIR).is_dir()


def load_dataset(directory: Path) -> Dataset:
    chunks = sorted((directory / CHUNKS_DIR).glob("*.wav"))
    if not chunks:
        raise FileNotFoundError(f"no chunks in {directory / CHUNKS_DIR}")
    examples = []
    for wav in chunks:
        side = read_sidecar(sidecar_path(wav))
        mfcc_path = mfcc_sidecar_path(wav)
        features = ConditioningFeatures(
            f0_hz=side.f0_hz,
            f0_confidence=side.f0_confidence,
            loudness_db=side.loudness_db,
            mfcc=read_mfcc_sidecar(mfcc_path) if mfcc_path.exists() else None,
        )
        examples.append(Example(audio=read_wav(wav), features=features, source=wav.name))
    return Dataset(examples=examples, stats=read_stats(directory / STATS_FILE))
