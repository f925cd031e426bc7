# env.py
# Process-level settings taken from the environment.
import os
from typing import Optional

THREADS_VAR = "SPATIAL_CLASSIFY_THREADS"
LOG_LEVEL_VAR = "SPATIAL_CLASSIFY_LOG_LEVEL"
RESULTS_DB_VAR = "SPATIAL_CLASSIFY_RESULTS_DB"

DEFAULT_LOG_LEVEL = "WARNING"
DEFAULT_RESULTS_DB = "results.db"


def _int_env(name: str, default: int) -> int:
    raw = os.environ.get(name, "").strip()
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


def max_threads() -> int:
    return _int_env(THREADS_VAR, os.cpu_count() or 1)


def worker_count(requested: Optional[int] = None) -> int:
    """Number of parallel workers: the request, capped by SPATIAL_CLASSIFY_THREADS."""
    cap = max_threads()
    if requested is None:
        return cap
    return max(1, min(int(requested), cap))


def log_level() -> str:
    return os.environ.get(LOG_LEVEL_VAR, DEFAULT_LOG_LEVEL).strip().upper() or DEFAULT_LOG_LEVEL


def results_db_name() -> str:
    return os.environ.get(RESULTS_DB_VAR, DEFAULT_RESULTS_DB).strip() or DEFAULT_RESULTS_DB
