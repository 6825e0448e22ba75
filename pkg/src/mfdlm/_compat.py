"""Optional numba acceleration.

Set ``MFDLM_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""
from __future__ import annotations

import os

_DISABLED = os.environ.get("MFDLM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAS_NUMBA = _numba is not None and not _DISABLED


def jit(*args, **kwargs):
    """``numba.njit`` when acceleration is active, identity otherwise."""
    if HAS_NUMBA:
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda func: func


def set_threads(n: int | None) -> None:
    if n is None or not HAS_NUMBA:
        return
    _numba.set_num_threads(max(1, min(int(n), _numba.config.NUMBA_NUM_THREADS)))
