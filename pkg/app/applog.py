"""App log for troubleshooting: level-tagged lines in logs_dir/app.log and per-run training logs."""
from __future__ import annotations

import re
from datetime import datetime, timezone
from pathlib import Path

from app.config import settings

UTC = timezone.utc

_LOG_LEVEL_ORDER = {"debug": 0, "info": 1, "warn": 2, "error": 3}

_APP_LEVEL_RE = re.compile(r"^\[[^\]]+\] \[(DEBUG|INFO|WARN|ERROR)\] ", re.IGNORECASE)

APP_LOG_FILENAME = "app.log"
MAX_RUN_LOG_BYTES = 2 * 1024 * 1024
TRIM_KEEP_BYTES = 1 * 1024 * 1024


def classify_app_log_line(line: str) -> str:
    """Return 'debug', 'info', 'warn', or 'error' for an application log line.

    Lines written by append_app_log() carry a [LEVEL] tag after the timestamp and are
    parsed directly. Untagged lines fall back to content-based heuristics.
    """
    s = line.strip()
    if not s:
        return "debug"
    m = _APP_LEVEL_RE.match(s)
    if m:
        return m.group(1).lower()
    lower = s.lower()
    if "diverged" in lower or "error" in lower or "failed" in lower:
        return "error"
    if "dropped" in lower or "warning" in lower:
        return "warn"
    return "info"


def filter_log_lines(lines: list[str], level: str) -> list[str]:
    """Return only lines at or above the given log level."""
    min_level = _LOG_LEVEL_ORDER.get((level or "debug").lower(), 0)
    if min_level == 0:
        return lines
    return [ln for ln in lines if _LOG_LEVEL_ORDER.get(classify_app_log_line(ln), 0) >= min_level]


def get_app_log_path() -> Path:
    """Path to the application log."""
    assert settings.logs_dir
    return settings.logs_dir / APP_LOG_FILENAME


def _format_line(message: str, level: str) -> str:
    ts = datetime.now(UTC).strftime("%Y-%m-%dT%H:%M:%SZ")
    tag = (level or "info").upper()
    return f"[{ts}] [{tag}] {message.strip()}\n"


def append_app_log(message: str, level: str = "info") -> None:
    """Append a timestamped, level-tagged line to the application log."""
    if not settings.logs_dir:
        return
    path = get_app_log_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open("a", encoding="utf-8") as f:
            f.write(_format_line(message, level))
    except OSError:
        pass


def _trim_run_log_if_needed(path: Path) -> None:
    """If log file exceeds MAX_RUN_LOG_BYTES, keep only the last TRIM_KEEP_BYTES."""
    if not path.exists():
        return
    try:
        if path.stat().st_size <= MAX_RUN_LOG_BYTES:
            return
        content = path.read_bytes()
        tail = content[-TRIM_KEEP_BYTES:]
        newline_at = tail.find(b"\n")
        if newline_at != -1:
            tail = tail[newline_at + 1:]
        path.write_bytes(tail)
    except OSError:
        pass


def append_run_log(path: Path, message: str, level: str = "info") -> None:
    """Append a line to a run's own log (train.log in the output dir) and to the app log."""
    append_app_log(message, level)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _trim_run_log_if_needed(path)
        with path.open("a", encoding="utf-8") as f:
            f.write(_format_line(message, level))
    except OSError:
        pass


def tail_app_log(tail: int = 200, level: str | None = None) -> list[str]:
    """Return the last N lines of the application log, filtered by level."""
    path = get_app_log_path()
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8", errors="replace").strip().splitlines()
    filtered = filter_log_lines(lines, level or settings.log_level)
    return filtered[-tail:] if tail else filtered
