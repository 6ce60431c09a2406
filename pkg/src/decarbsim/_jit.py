"""Numba switch.

Hot kernels are written once in loop form and compiled with ``numba.njit``
when numba is importable and ``DECARBSIM_DISABLE_NUMBA`` is unset.  With the
flag set the same functions run as plain Python/numpy, which is slow but
useful for debugging and for checking the compiled path against a reference.
"""

import os

_FLAG = os.environ.get("DECARBSIM_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def jit(fn):
    """Compile ``fn`` in nopython mode when numba is enabled."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
