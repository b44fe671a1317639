"""Numba dispatch for the hot numeric kernels.

Set ``GLOBALTRACK_DISABLE_NUMBA=1`` to force the pure-numpy paths. When numba
is not importable the numpy paths are used automatically.
"""

import os

_DISABLED = os.environ.get("GLOBALTRACK_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLED


def njit(func):
    """Compile ``func`` in nopython mode when numba is available.

    The undecorated function is kept as ``func.py_func`` either way so tests
    can run the loop implementation as plain Python.
    """
    if not HAS_NUMBA:
        func.py_func = func
        return func
    return _njit(cache=True, nogil=True)(func)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
