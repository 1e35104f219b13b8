import logging
import os
import json
import time
import threading
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Dict, Iterator, Optional

# ==== CONFIGURATION ====
DEFAULT_LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
ENABLE_JSON_LOGS = os.getenv("LOG_JSON", "0") == "1"
ENABLE_COLOR = os.getenv("LOG_COLOR", "1") == "1"

LOG_DIR = Path(os.getenv("LOG_DIR", "logs"))
LOG_FILE_NAME = "smmrad2d.log"
ERROR_LOG_FILE_NAME = "smmrad2d.error.log"
RUN_LOG_NAME = "run.log"
MAX_LOG_SIZE_MB = 5
BACKUP_COUNT = 5

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

_logger_lock = threading.Lock()
_run_handler: Optional[logging.Handler] = None

LEVEL_COLORS = {
    "DEBUG": "\033[94m",
    "INFO": "\033[92m",
    "WARNING": "\033[93m",
    "ERROR": "\033[91m",
    "CRITICAL": "\033[95m",
}
COLOR_RESET = "\033[0m"


class JsonFormatter(logging.Formatter):
    """One JSON object per record; extra numeric fields (``elapsed``) are kept."""

    def format(self, record):
        log_record = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "module": record.name,
            "message": record.getMessage(),
        }
        elapsed = getattr(record, "elapsed", None)
        if elapsed is not None:
            log_record["elapsed"] = elapsed
        return json.dumps(log_record)


class ColoredFormatter(logging.Formatter):
    def format(self, record):
        color = LEVEL_COLORS.get(record.levelname, "")
        reset = COLOR_RESET if color else ""
        return f"{color}{super().format(record)}{reset}"


def _formatter(json_output: bool, console: bool) -> logging.Formatter:
    if json_output:
        return JsonFormatter(datefmt=DATE_FORMAT)
    if console and ENABLE_COLOR:
        return ColoredFormatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    return logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)


def _rotating(file_path: Path, level: int, json_output: bool) -> logging.Handler:
    handler = RotatingFileHandler(
        file_path,
        maxBytes=MAX_LOG_SIZE_MB * 1024 * 1024,
        backupCount=BACKUP_COUNT,
        encoding="utf-8",
    )
    handler.setFormatter(_formatter(json_output, console=False))
    handler.setLevel(level)
    return handler


def get_logger(name: str = "smmrad2d", level: Optional[str] = None, json_output: bool = ENABLE_JSON_LOGS):
    """Return the named logger with file, error-file and console handlers installed once."""
    with _logger_lock:
        logger = logging.getLogger(name)
        if logger.handlers:
            return logger

        logger.setLevel(level or DEFAULT_LOG_LEVEL)
        try:
            LOG_DIR.mkdir(parents=True, exist_ok=True)
            logger.addHandler(_rotating(LOG_DIR / LOG_FILE_NAME, logging.INFO, json_output))
            logger.addHandler(_rotating(LOG_DIR / ERROR_LOG_FILE_NAME, logging.ERROR, json_output))
        except OSError:
            pass  # read-only working directory: console only

        console = logging.StreamHandler()
        console.setFormatter(_formatter(json_output, console=True))
        console.setLevel(level or DEFAULT_LOG_LEVEL)
        logger.addHandler(console)
        if _run_handler is not None:
            logger.addHandler(_run_handler)

        logger.propagate = False
        return logger


def _all_loggers():
    return [
        lg for lg in logging.Logger.manager.loggerDict.values()
        if isinstance(lg, logging.Logger) and lg.handlers
    ]


def set_level(level: str) -> None:
    """Change the level of every logger created so far (``LOG_LEVEL`` or the CLI ``--log-level`` flag)."""
    level = level.upper()
    with _logger_lock:
        for lg in _all_loggers():
            lg.setLevel(level)
            for handler in lg.handlers:
                if isinstance(handler, logging.StreamHandler) and not isinstance(handler, logging.FileHandler):
                    handler.setLevel(level)


def attach_run_log(out_dir: Path, json_output: bool = ENABLE_JSON_LOGS) -> Path:
    """Mirror every logger into ``<out_dir>/run.log`` for the duration of a driver run."""
    global _run_handler
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RUN_LOG_NAME
    with _logger_lock:
        if _run_handler is not None:
            _detach_locked()
        handler = logging.FileHandler(path, mode="w", encoding="utf-8")
        handler.setFormatter(_formatter(json_output, console=False))
        handler.setLevel(logging.DEBUG)
        _run_handler = handler
        for lg in _all_loggers():
            lg.addHandler(handler)
    return path


def _detach_locked() -> None:
    global _run_handler
    if _run_handler is None:
        return
    for lg in _all_loggers():
        if _run_handler in lg.handlers:
            lg.removeHandler(_run_handler)
    _run_handler.close()
    _run_handler = None


def detach_run_log() -> None:
    with _logger_lock:
        _detach_locked()


class PhaseTimer:
    """Accumulates wall time per named phase (sweep, closures, rhs, solve, ...)."""

    def __init__(self):
        self.totals: Dict[str, float] = {}
        self.counts: Dict[str, int] = {}
        self._lock = threading.Lock()

    @contextmanager
    def phase(self, name: str, log: Optional[logging.Logger] = None) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            with self._lock:
                self.totals[name] = self.totals.get(name, 0.0) + elapsed
                self.counts[name] = self.counts.get(name, 0) + 1
            if log is not None:
                log.debug(f"⏱️ {name}: {elapsed:.3f}s", extra={"elapsed": elapsed})

    def total(self, name: str) -> float:
        return self.totals.get(name, 0.0)

    def reset(self) -> None:
        with self._lock:
            self.totals.clear()
            self.counts.clear()


# CLI Diagnostics
if __name__ == "__main__":
    log = get_logger("diagnostic", level="DEBUG", json_output=False)
    timer = PhaseTimer()
    with timer.phase("diagnostic", log):
        log.debug("🐞 Debug message")
        log.info("ℹ️ Info message")
        log.warning("⚠️ Warning message")
        log.error("❌ Error message")
        log.critical("🔥 Critical message")
