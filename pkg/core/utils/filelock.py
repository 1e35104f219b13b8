# smmrad2d/core/utils/filelock.py

import os
import csv
import json
from pathlib import Path
from contextlib import contextmanager
from typing import Iterable, Mapping, Optional, Sequence

from filelock import FileLock, Timeout

from core.utils.logger import get_logger

log = get_logger("🔐 filelock")

# ⏲️ Configuration Constants
DEFAULT_TIMEOUT = 10  # seconds to wait for a sibling job holding the lock


def _lock_for(path: Path, timeout: float) -> FileLock:
    return FileLock(str(path) + ".lock", timeout=timeout)


# 🧰 Locked file access
@contextmanager
def locked_file(path, mode="r", timeout=DEFAULT_TIMEOUT, newline=None):
    """
    Open ``path`` while holding ``<path>.lock``.

    Refinement jobs of one driver may run concurrently and write into the same
    output directory; every writer goes through this context manager.

    Raises:
        TimeoutError: the lock was not acquired within ``timeout`` seconds.
    """
    path = Path(path)
    if "w" in mode or "a" in mode:
        path.parent.mkdir(parents=True, exist_ok=True)

    lock = _lock_for(path, timeout)
    try:
        lock.acquire()
    except Timeout as e:
        log.error(f"⏱️ Timeout: lock on {path.name} not acquired after {timeout}s")
        raise TimeoutError(f"Could not acquire lock on {path} within {timeout} seconds") from e

    log.debug(f"🔒 Lock acquired: {path.name}")
    try:
        with open(path, mode, encoding="utf-8", newline=newline) as f:
            yield f
            if "w" in mode or "a" in mode:
                f.flush()
                os.fsync(f.fileno())
    finally:
        lock.release()
        log.debug(f"🔓 Lock released: {path.name}")


# ✏️ Writers

def write_locked_json(filepath, data, indent: int = 2) -> Path:
    """Write ``data`` as JSON under the file lock (numpy scalars are converted)."""
    try:
        with locked_file(filepath, mode="w") as f:
            json.dump(data, f, indent=indent, default=_json_default)
        log.info(f"💾 JSON written to {filepath}")
    except Exception as e:
        log.error(f"❌ Failed to write JSON to {filepath}: {e}")
        raise
    return Path(filepath)


def write_locked_text(filepath, text: str) -> Path:
    with locked_file(filepath, mode="w") as f:
        f.write(text)
    log.info(f"💾 Text written to {filepath}")
    return Path(filepath)


def write_locked_csv(
    filepath,
    columns: Sequence[str],
    rows: Iterable[Mapping[str, object]],
    header_lines: Optional[Sequence[str]] = None,
) -> Path:
    """
    Write a CSV with a fixed column order.

    ``header_lines`` are emitted first, each prefixed with ``# ``; missing row
    values are written as empty cells.
    """
    with locked_file(filepath, mode="w", newline="") as f:
        for line in header_lines or ():
            f.write(f"# {line}\n")
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_cell(v) for k, v in row.items()})
    log.info(f"💾 CSV written to {filepath}")
    return Path(filepath)


def _csv_cell(value):
    if hasattr(value, "item"):
        value = value.item()
    if isinstance(value, float):
        return repr(value)
    return value


def _json_default(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


# 🧪 Manual check
if __name__ == "__main__":
    test_path = Path("/tmp/smmrad2d_filelock.json")
    write_locked_json(test_path, {"message": "hello from filelock"})
    with locked_file(test_path, mode="r") as f:
        log.info(f"📖 Read back content: {json.load(f)}")
