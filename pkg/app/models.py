"""Pydantic models for audio values, features, statistics and run configuration."""
from __future__ import annotations

from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SAMPLE_RATE = 16000
FRAME_RATE = 250
MFCC_FRAME_RATE = 125
LOUDNESS_FLOOR_DB = -120.0


def _frozen_array(value: Any, ndim: int | None = None) -> np.ndarray:
    """Copy to a read-only float64 array; reject NaN/Inf."""
    arr = np.array(value, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains NaN or Inf")
    arr.flags.writeable = False
    return arr


class _ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class AudioBuffer(_ArrayModel):
    """Mono sample sequence at a fixed sample rate."""
    samples: np.ndarray
    sample_rate: int = Field(default=SAMPLE_RATE, gt=0)

    @field_validator("samples", mode="before")
    @classmethod
    def _check_samples(cls, v: Any) -> np.ndarray:
        return _frozen_array(v, ndim=1)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


class FrameSeries(_ArrayModel):
    """Time series of per-frame vectors at a fixed frame rate. 1-d input becomes dim 1."""
    frames: np.ndarray
    frame_rate: float = Field(default=FRAME_RATE, gt=0)

    @field_validator("frames", mode="before")
    @classmethod
    def _check_frames(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        return _frozen_array(arr, ndim=2)

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def values(self) -> np.ndarray:
        """The single column of a dim-1 series."""
        if self.dim != 1:
            raise ValueError(f"values needs a dim-1 series, this one has dim {self.dim}")
        return self.frames[:, 0]

    def truncated(self, num_frames: int) -> FrameSeries:
        return FrameSeries(frames=self.frames[:num_frames], frame_rate=self.frame_rate)


class Spectrogram(_ArrayModel):
    """Magnitude STFT: [num_frames x (fft_size/2 + 1)]."""
    mags: np.ndarray
    fft_size: int = Field(gt=0)
    hop: int = Field(gt=0)

    @field_validator("mags", mode="before")
    @classmethod
    def _check_mags(cls, v: Any) -> np.ndarray:
        arr = _frozen_array(v, ndim=2)
        if np.any(arr < 0):
            raise ValueError("magnitudes must be non-negative")
        return arr

    @model_validator(mode="after")
    def _check_bins(self) -> Spectrogram:
        if self.mags.shape[1] != self.fft_size // 2 + 1:
            raise ValueError(
                f"spectrogram has {self.mags.shape[1]} bins, expected {self.fft_size // 2 + 1}"
            )
        return self

    @property
    def num_frames(self) -> int:
        return int(self.mags.shape[0])


class ConditioningFeatures(_ArrayModel):
    """f0, voicing confidence and loudness at 250 Hz, with optional 30-dim MFCC at 125 Hz."""
    f0_hz: FrameSeries
    f0_confidence: FrameSeries
    loudness_db: FrameSeries
    mfcc: FrameSeries | None = None

    @model_validator(mode="after")
    def _check_series(self) -> ConditioningFeatures:
        n = self.f0_hz.num_frames
        for name in ("f0_confidence", "loudness_db"):
            if getattr(self, name).num_frames != n:
                raise ValueError(f"{name} has {getattr(self, name).num_frames} frames, f0 has {n}")
        for name in ("f0_hz", "f0_confidence", "loudness_db"):
            if getattr(self, name).dim != 1:
                raise ValueError(f"{name} must have dim 1")
        if np.any(self.f0_hz.frames < 0):
            raise ValueError("f0 must be non-negative")
        conf = self.f0_confidence.frames
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("confidence must lie in [0, 1]")
        return self

    @property
    def num_frames(self) -> int:
        return self.f0_hz.num_frames


class DatasetStats(BaseModel):
    """Pitch and loudness moments of a corpus (or of a single melody)."""
    mean_midi_pitch: float
    mean_loudness_db: float
    std_loudness_db: float = Field(ge=0)


class PreconditionOptions(BaseModel):
    """f0 and loudness preprocessing applied before rendering. Defaults are the identity chain."""
    use_statistics: bool = False
    mask_threshold: float = 0.0
    quiet: float = Field(default=0.0, ge=0)
    autotune: float = Field(default=0.0, ge=0, le=1)
    octave_shift: int = 0
    loudness_shift: float = 0.0

    @classmethod
    def transfer_defaults(cls) -> PreconditionOptions:
        """Hand-picked transfer settings: statistics on, threshold 1, quiet 20, +1 octave, -10dB."""
        return cls(
            use_statistics=True,
            mask_threshold=1.0,
            quiet=20.0,
            autotune=0.0,
            octave_shift=1,
            loudness_shift=-10.0,
        )


class ModelConfig(BaseModel):
    """Decoder and synthesizer dimensions."""
    n_harmonics: int = Field(default=60, ge=1, le=100)
    n_noise: int = Field(default=65, ge=2)
    mlp_units: int = Field(default=512, ge=1)
    mlp_layers: int = Field(default=3, ge=1)
    gru_units: int = Field(default=512, ge=1)
    use_z: bool = False
    z_dim: int = Field(default=16, ge=1)
    z_gru_units: int = Field(default=512, ge=1)
    mfcc_count: int = Field(default=30, ge=1)
    use_reverb: bool = True
    reverb_length: int = Field(default=SAMPLE_RATE, ge=2)


class TrainConfig(BaseModel):
    """Everything that reproduces a training run."""
    model: ModelConfig = Field(default_factory=ModelConfig)
    batch_size: int = Field(default=16, ge=1)
    steps: int = Field(default=40000, ge=1)
    learning_rate: float = Field(default=1e-3, ge=0)
    lr_decay: float = Field(default=0.98, gt=0)
    clip_norm: float = Field(default=3.0, gt=0)
    example_seconds: float = Field(default=4.0, gt=0)
    seed: int = 0
    log_every: int = Field(default=10, ge=1)
    checkpoint_every: int = Field(default=1000, ge=1)


class Example(_ArrayModel):
    """One training chunk: audio, its features, and where it came from."""
    audio: AudioBuffer
    features: ConditioningFeatures
    source: str = ""


class Dataset(_ArrayModel):
    """Chunked training examples in deterministic order, with corpus statistics."""
    examples: list[Example]
    stats: DatasetStats

    @model_validator(mode="after")
    def _check(self) -> Dataset:
        if not self.examples:
            raise ValueError("a dataset needs at least one example")
        return self

    def __len__(self) -> int:
        return len(self.examples)


class Checkpoint(_ArrayModel):
    """Named parameter tensors, optimizer moments, step counter and run configuration."""
    params: dict[str, np.ndarray]
    step: int = Field(default=0, ge=0)
    config: TrainConfig = Field(default_factory=TrainConfig)
    stats: DatasetStats | None = None
    adam_m: dict[str, np.ndarray] = Field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = Field(default_factory=dict)
