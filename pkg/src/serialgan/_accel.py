"""Numba switch.

Hot kernels are written once in numba-compatible Python. When numba is
importable and ``SERIALGAN_NO_NUMBA`` is unset (or "0"), they are compiled
with ``@njit``; otherwise the plain Python/numpy versions are used.
"""

import os

_flag = os.environ.get("SERIALGAN_NO_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("disabled by SERIALGAN_NO_NUMBA")
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend():
    return "numba" if HAS_NUMBA else "numpy"
