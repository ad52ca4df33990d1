"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` kernel and a pure-numpy
fallback. ``VISIMAIL_NO_NUMBA=1`` (or numba being absent) selects the
fallback at import time. Both paths must return the same values; the
test-suite checks this directly by calling each variant.
"""
from __future__ import annotations

import os

_DISABLED = os.environ.get("VISIMAIL_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` with caching on; a no-op decorator when numba is missing.

    Kernels are always compiled when numba is importable, so benchmarks and
    equivalence tests can reach them even when the fallback is selected.
    """
    kwargs.setdefault("cache", True)
    if _numba is None:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return _numba.njit(*args, **kwargs)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
