"""Application configuration."""
from __future__ import annotations

from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


def _data_dir() -> Path:
    base = Path(__file__).resolve().parent.parent
    data = base / "data"
    data.mkdir(parents=True, exist_ok=True)
    return data


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="SMS_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # When true, every autodiff op checks its output for NaN/Inf.
    debug: bool = False

    # Minimum level shown by `sms logs` (debug/info/warn/error).
    log_level: str = "info"

    # Files processed in parallel during dataset preparation.
    workers: int = Field(default=1, ge=1)

    # SMS_SEED overrides the seed of any config file.
    seed: int | None = None

    data_dir: Path = _data_dir()
    logs_dir: Path | None = None

    def __init__(self, **kwargs):  # type: ignore[no-untyped-def]
        super().__init__(**kwargs)
        self.logs_dir = self.logs_dir or self.data_dir / "logs"
        self.logs_dir.mkdir(parents=True, exist_ok=True)


settings = Settings()
