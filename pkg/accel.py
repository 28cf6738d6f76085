"""Optional numba acceleration.

The naive reference kernels are written as plain loops so they stay readable;
when numba is importable they are compiled, otherwise they run as Python.
"""
import logging
import os

from constants import THREADS_ENV_VAR

logger = logging.getLogger(__name__)


def _noop_jit(*args, **kwargs):
    """A decorator that does nothing, usable bare or with arguments."""
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _have_numba() -> bool:
    try:
        import numba  # noqa: F401

        return True
    except ImportError:
        return False


HAVE_NUMBA = _have_numba() and os.environ.get("AFRAN_DISABLE_JIT", "") != "1"

if HAVE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit


def set_thread_cap(threads: int) -> None:
    """Cap numba's worker pool; a no-op without numba."""
    if not HAVE_NUMBA:
        return
    try:
        import numba

        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
    except (ImportError, ValueError) as exc:
        logger.warning("Could not apply %s=%s to numba: %s", THREADS_ENV_VAR, threads, exc)
