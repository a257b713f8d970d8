"""Resolve config, output, and parallelism settings for CLI runs and tools."""

from __future__ import annotations

import os

CONFIG_FILENAME = ".mlphand.json"
DEFAULT_OUTPUT_DIRNAME = "runs"
THREADS_ENV = "S2M_THREADS"


def get_config_file() -> str:
    return os.path.join(os.getcwd(), CONFIG_FILENAME)


def get_output_dir(configured: str = "") -> str:
    return os.path.abspath(configured or os.path.join(os.getcwd(), DEFAULT_OUTPUT_DIRNAME))


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def get_thread_count() -> int:
    """S2M_THREADS caps worker threads; 0, unset or garbage means auto."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    try:
        requested = int(raw) if raw else 0
    except ValueError:
        requested = 0
    if requested <= 0:
        return os.cpu_count() or 1
    return requested
