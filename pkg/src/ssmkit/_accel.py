"""Numba detection and the pure-numpy switch.

Set ``SSMKIT_DISABLE_NUMBA=1`` to force every hot kernel onto its numpy
path.  The flag is read once at import time.
"""
import os

_DISABLED = os.environ.get("SSMKIT_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba as _numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise a no-op decorator.

    Kernels are always compiled when numba exists so both paths stay testable;
    ``USE_NUMBA`` only decides which one the public dispatchers call.
    """
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(func):
        return func

    return wrap


def backend():
    return "numba" if USE_NUMBA else "numpy"
