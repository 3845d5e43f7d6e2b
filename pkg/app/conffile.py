"""Run configuration files: `key = value` lines, `#` comments and `include <relative path>`.

Includes are expanded depth-first where they appear, so keys after an include override the
included values and keys in an included file override earlier ones.
"""
from __future__ import annotations

from collections.abc import Iterable
from pathlib import Path

from pydantic import BaseModel, ValidationError

from app.config import settings
from app.models import DatasetStats, ModelConfig, TrainConfig

RESOLVED_FILENAME = "resolved.conf"

MODEL_KEYS = frozenset(ModelConfig.model_fields)
TRAIN_KEYS = frozenset(TrainConfig.model_fields) - {"model"}


class ConfigFileError(ValueError):
    """A config file problem tied to a file and line."""

    def __init__(self, path: Path, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ConfigEntry(BaseModel):
    value: str
    path: Path
    line: int


def _read(path: Path, allowed: frozenset[str], stack: tuple[Path, ...],
          out: dict[str, ConfigEntry], origin: tuple[Path, int] | None) -> None:
    path = path.resolve()
    if path in stack:
        chain = " -> ".join(p.name for p in (*stack, path))
        assert origin is not None
        raise ConfigFileError(origin[0], origin[1], f"include cycle: {chain}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        if origin is None:
            raise ConfigFileError(path, 0, f"cannot read config: {e.strerror or e}") from e
        raise ConfigFileError(origin[0], origin[1],
                              f"cannot include {path}: {e.strerror or e}") from e
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include ") or line == "include":
            target = line[len("include"):].strip()
            if not target:
                raise ConfigFileError(path, lineno, "include needs a relative path")
            _read(path.parent / target, allowed, (*stack, path), out, (path, lineno))
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigFileError(path, lineno, f"expected `key = value`, got {raw.strip()!r}")
        if key not in allowed:
            raise ConfigFileError(path, lineno, f"unknown key {key!r}")
        out[key] = ConfigEntry(value=value, path=path, line=lineno)


def read_entries(path: Path, allowed: Iterable[str]) -> dict[str, ConfigEntry]:
    """Resolved key -> entry map; each entry remembers the file and line that set it."""
    out: dict[str, ConfigEntry] = {}
    _read(Path(path), frozenset(allowed), (), out, None)
    return out


def _validate(model: type[BaseModel], entries: dict[str, ConfigEntry], keys: frozenset[str],
              path: Path) -> BaseModel:
    raw = {k: e.value for k, e in entries.items() if k in keys}
    try:
        return model.model_validate(raw)
    except ValidationError as e:
        err = e.errors()[0]
        key = str(err["loc"][0]) if err["loc"] else ""
        entry = entries.get(key)
        if entry is None:
            raise ConfigFileError(path, 0, err["msg"]) from e
        raise ConfigFileError(entry.path, entry.line, f"{key}: {err['msg']}") from e


def load_train_config(path: Path) -> tuple[TrainConfig, dict[str, ConfigEntry]]:
    """TrainConfig from a config file; SMS_SEED overrides the file's seed."""
    entries = read_entries(path, MODEL_KEYS | TRAIN_KEYS)
    model = _validate(ModelConfig, entries, MODEL_KEYS, path)
    train = _validate(TrainConfig, entries, TRAIN_KEYS, path)
    config = train.model_copy(update={"model": model})
    if settings.seed is not None:
        config = config.model_copy(update={"seed": settings.seed})
    return config, entries


def render_config(config: TrainConfig) -> str:
    """Every key with its effective value, one `key = value` per line, sorted."""
    values = {**config.model_dump(exclude={"model"}), **config.model.model_dump()}
    lines = [f"{k} = {_format(v)}" for k, v in sorted(values.items())]
    return "\n".join(lines) + "\n"


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_resolved(config: TrainConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_FILENAME
    path.write_text(render_config(config), encoding="utf-8")
    return path


def write_stats(path: Path, stats: DatasetStats) -> None:
    lines = [f"{k} = {v!r}" for k, v in stats.model_dump().items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_stats(path: Path) -> DatasetStats:
    keys = frozenset(DatasetStats.model_fields)
    entries = read_entries(path, keys)
    return _validate(DatasetStats, entries, keys, path)
