"""Loggers for the simulation and experiment sides, plus a per-stage wall-clock timer.

Every logger writes the same ``key=value`` lines to stdout and to a rotating
file ``<log dir>/<component>.log``. The directory comes from
``HAPTIC_ACT_LOG_DIR`` and the level from ``HAPTIC_ACT_LOG_LEVEL``.
"""

import logging
import os
import sys
import threading
import time
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Dict, Iterator, List, Optional

DEFAULT_LOG_DIR = Path.home() / ".haptic-act" / "logs"
LOG_FORMAT = "[%(asctime)s] p%(process)s {%(pathname)s:%(lineno)d} %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
ROTATE_BYTES = 10 * 1024 * 1024
ROTATE_BACKUPS = 5

COMPONENTS = ("sim", "experiment")

_cache: Dict[str, logging.Logger] = {}
_cache_lock = threading.Lock()


def log_dir() -> Path:
    """Directory the rotating log files go to."""
    override = os.environ.get("HAPTIC_ACT_LOG_DIR")
    return Path(override) if override else DEFAULT_LOG_DIR


def env_log_level() -> int:
    """
    Level named by HAPTIC_ACT_LOG_LEVEL (``DEBUG``, ``warning``, ...).

    Unset or unrecognised names fall back to INFO.
    """
    level = logging.getLevelName(os.environ.get("HAPTIC_ACT_LOG_LEVEL", "INFO").strip().upper())
    return level if isinstance(level, int) else logging.INFO


def _build_handlers(log_file: Path, level: int, max_bytes: int, backup_count: int) -> List[logging.Handler]:
    log_file.parent.mkdir(parents=True, exist_ok=True)
    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)
    handlers: List[logging.Handler] = [
        logging.StreamHandler(sys.stdout),
        RotatingFileHandler(str(log_file), maxBytes=max_bytes, backupCount=backup_count),
    ]
    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(formatter)
    return handlers


def setup_logger(
    name: str,
    log_file: Optional[Path] = None,
    level: Optional[int] = None,
    max_bytes: int = ROTATE_BYTES,
    backup_count: int = ROTATE_BACKUPS,
) -> logging.Logger:
    """
    (Re)configure the ``haptic_act.<name>`` logger.

    Calling it again for the same name replaces the handlers instead of
    stacking new ones.

    Args:
        name: Component name, also the default log file stem.
        log_file: Explicit log file; defaults to ``log_dir() / f"{name}.log"``.
        level: Logging level; defaults to :func:`env_log_level`.
        max_bytes: File size that triggers rotation.
        backup_count: Rotated files kept.

    Returns:
        The configured logger.
    """
    logger = logging.getLogger(f"haptic_act.{name}")
    level = env_log_level() if level is None else level
    logger.setLevel(level)
    for old in list(logger.handlers):
        logger.removeHandler(old)
        old.close()

    target = log_file if log_file is not None else log_dir() / f"{name}.log"
    for handler in _build_handlers(target, level, max_bytes, backup_count):
        logger.addHandler(handler)
    logger.propagate = False
    return logger


def get_logger(component: str) -> logging.Logger:
    """
    Shared logger of one component, configured on first use.

    Raises:
        ValueError: If ``component`` is not one of :data:`COMPONENTS`.
    """
    if component not in COMPONENTS:
        raise ValueError(f"Unknown log component {component!r}; expected one of {', '.join(COMPONENTS)}")
    with _cache_lock:
        if component not in _cache:
            _cache[component] = setup_logger(component)
        return _cache[component]


def get_sim_logger() -> logging.Logger:
    """Logger of the environment, the expert and dataset collection."""
    return get_logger("sim")


def get_experiment_logger() -> logging.Logger:
    """Logger of training, rollouts, the harness and the command line."""
    return get_logger("experiment")


class StageTimer:
    """
    Wall-clock totals of the named stages of one run, in milliseconds.

    Stages may be tracked repeatedly (one ``train`` per condition, say); their
    durations add up. The overall clock starts with :meth:`start`.
    """

    def __init__(self) -> None:
        self._origin: Optional[float] = None
        self._elapsed_ms: Dict[str, float] = {}

    def start(self) -> "StageTimer":
        self._origin = time.perf_counter()
        return self

    @contextmanager
    def track(self, stage: str) -> Iterator[None]:
        """Add the duration of the ``with`` body to ``stage``, even if it raises."""
        began = time.perf_counter()
        try:
            yield
        finally:
            spent = (time.perf_counter() - began) * 1000.0
            self._elapsed_ms[stage] = self._elapsed_ms.get(stage, 0.0) + spent

    @property
    def stages(self) -> Dict[str, float]:
        """Copy of the per-stage totals, in first-tracked order."""
        return dict(self._elapsed_ms)

    def get_timing(self, stage: str) -> Optional[float]:
        return self._elapsed_ms.get(stage)

    def get_total_ms(self) -> float:
        """Milliseconds since :meth:`start`; 0.0 before it."""
        if self._origin is None:
            return 0.0
        return (time.perf_counter() - self._origin) * 1000.0

    def format_log(self, prefix: str = "") -> str:
        """One log line: ``<prefix> total_ms=... <stage>_ms=...``."""
        fields = [f"total_ms={self.get_total_ms():.2f}"]
        fields.extend(f"{stage}_ms={ms:.2f}" for stage, ms in self._elapsed_ms.items())
        return " ".join([prefix, *fields] if prefix else fields)
