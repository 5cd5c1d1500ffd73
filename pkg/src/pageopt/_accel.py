"""Numba switch.

Hot kernels are compiled with ``numba.njit`` unless ``PAGEOPT_DISABLE_NUMBA=1``
is set or numba is not importable, in which case the vectorized numpy
implementations in :mod:`pageopt.kernels` are used instead.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

DISABLE_ENV = "PAGEOPT_DISABLE_NUMBA"


def numba_enabled() -> bool:
    if numba is None:
        return False
    return os.environ.get(DISABLE_ENV, "0").strip().lower() not in ("1", "true", "yes")


def njit(fn):
    """Compile ``fn`` lazily when numba is present; otherwise return it untouched."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
