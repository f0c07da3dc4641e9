"""Backend selection for the compiled kernels.

Set ``RLSEG_DISABLE_NUMBA=1`` before import to force the pure-numpy path.
"""
import os

_FLAG = os.environ.get("RLSEG_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(fn, cache=True):
    """Compile ``fn`` in nopython mode when numba is available, else return it unchanged."""
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=cache)(fn)
