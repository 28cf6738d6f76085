import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, List, TypeVar

from constants import THREADS_ENV_VAR

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Number of worker threads allowed, honouring the AFRAN_THREADS cap.

    Raises:
        ValueError: If the environment variable is set to a non-positive or
            non-integer value.
    """
    raw = os.environ.get(THREADS_ENV_VAR, "").strip()
    default = os.cpu_count() or 1
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV_VAR} must be a positive integer, got {raw!r}") from exc
    if value < 1:
        raise ValueError(f"{THREADS_ENV_VAR} must be a positive integer, got {raw!r}")
    return value


def ordered_map(func: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> List[R]:
    """Map ``func`` over ``items`` on a thread pool, returning results in input order."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, item) for item in items]
        return [f.result() for f in futures]


def atomic_write_bytes(target: Path, payload: bytes) -> Path:
    """Write ``payload`` to ``target`` so readers never observe a partial file.

    The bytes go to a uniquely named sibling first (claimed with O_EXCL by
    ``tempfile``) and are moved into place with ``os.replace``.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise
    return target


def atomic_write_text(target: Path, text: str) -> Path:
    return atomic_write_bytes(target, text.encode("utf-8"))


def dumps_stable(data) -> str:
    """JSON text with sorted keys and a trailing newline, byte-stable across runs."""
    return json.dumps(data, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(target: Path, data) -> Path:
    return atomic_write_text(target, dumps_stable(data))
