"""Hot inner loops with a numba backend and a pure-numpy fallback.

The backend is chosen once at import time. Set ``REMAX_DISABLE_NUMBA=1`` to
force the numpy path (also used automatically when numba is not importable).
Both backends are always reachable as ``remax.kernels.numpy_backend`` and
``remax.kernels.numba_backend`` (the latter may be ``None``).
"""

from __future__ import annotations

import os

from . import _numpy as numpy_backend

try:
    from . import _numba as numba_backend
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_backend = None

_disabled = os.environ.get("REMAX_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

USE_NUMBA = numba_backend is not None and not _disabled
BACKEND_NAME = "numba" if USE_NUMBA else "numpy"
_impl = numba_backend if USE_NUMBA else numpy_backend

solve_square_assignment = _impl.solve_square_assignment
pair_counts = _impl.pair_counts
masked_argmax = _impl.masked_argmax

__all__ = [
    "BACKEND_NAME",
    "USE_NUMBA",
    "masked_argmax",
    "numba_backend",
    "numpy_backend",
    "pair_counts",
    "solve_square_assignment",
]
