"""Numba dispatch switch.

Set ``BAVT_NUMBA=0`` in the environment (before import) to force the
pure-numpy fallbacks even when numba is installed.
"""
import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("BAVT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

njit_kwargs = {"nogil": True, "cache": False, "fastmath": False}


def njit(func):
    """``numba.njit`` when numba is importable, identity otherwise."""
    if HAS_NUMBA:
        return numba.njit(**njit_kwargs)(func)
    return func


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
