"""Kernel backend selection.

``SYMDISTILL_BACKEND=numpy`` forces the pure-numpy kernels; anything else
(or unset) uses numba when it imports cleanly.
"""
import os

BACKEND_ENV = "SYMDISTILL_BACKEND"


def _numba_available():
    try:
        import numba  # noqa: F401
    except ImportError:  # pragma: no cover - numba is a declared dependency
        return False
    return True


def requested_backend():
    value = os.environ.get(BACKEND_ENV, "numba").strip().lower()
    if value not in ("numba", "numpy"):
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {value!r}")
    if value == "numba" and not _numba_available():
        return "numpy"
    return value


BACKEND = requested_backend()
USE_NUMBA = BACKEND == "numba"
