"""Numba switch.

Set ``GSSAVIT_DISABLE_NUMBA=1`` to force the pure-numpy kernels.
"""

import os
import warnings

DISABLE_ENV = "GSSAVIT_DISABLE_NUMBA"

warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
if NUMBA_AVAILABLE and "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    # probe TBB last: an outdated TBB install only produces a warning
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get(DISABLE_ENV, "").lower() not in ("1", "true", "yes")


def default_backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def set_num_threads(n: int) -> None:
    """Limit numba's worker pool; results do not depend on the thread count."""
    if NUMBA_AVAILABLE and n > 0:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))
