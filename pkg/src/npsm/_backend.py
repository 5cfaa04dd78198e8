"""Kernel backend selection.

``NPSM_BACKEND=numpy`` forces the pure-numpy kernels; ``numba`` (the default
when numba imports cleanly) uses the ``@njit`` kernels. The variable is read
once at import time.
"""

import os

_requested = os.environ.get("NPSM_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"NPSM_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator


BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"
