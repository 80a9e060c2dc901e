"""Backend selection for the compiled kernels.

``GRANITE_BACKEND=numpy`` forces the pure-numpy path; the default uses numba
when it imports cleanly.
"""
import os

BACKEND = os.environ.get("GRANITE_BACKEND", "numba").strip().lower()

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None

USE_NUMBA = BACKEND != "numpy" and _nb is not None


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if _nb is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _nb.njit(*args, **kwargs)


def thread_count(default=1):
    """Thread count from ``GRANITE_THREADS`` (1 is the reproducible mode)."""
    try:
        n = int(os.environ.get("GRANITE_THREADS", default))
    except ValueError:
        n = default
    return max(1, n)
