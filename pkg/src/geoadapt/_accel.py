"""Backend switch for the hot kNN kernels.

Set ``GEOADAPT_NUMBA=0`` to force the pure-numpy path; otherwise numba is
used when it imports. Both paths accumulate squared differences feature by
feature in the same order, so they return bit-identical distances.
"""
from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None


def numba_requested() -> bool:
    return os.environ.get("GEOADAPT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def default_backend() -> str:
    return "numba" if HAVE_NUMBA and numba_requested() else "numpy"


def njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
