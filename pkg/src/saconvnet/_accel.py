"""Backend selection for the hot kernels.

Numba is used when it imports cleanly and ``SACONVNET_BACKEND`` is not set
to ``numpy``. Every jitted kernel has a pure-numpy twin in
:mod:`saconvnet.kernels`; both are importable regardless of the flag so the
benchmark and the tests can compare them.
"""
from __future__ import annotations

import logging
import os

logger = logging.getLogger(__name__)

ENV_FLAG = "SACONVNET_BACKEND"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _requested_backend() -> str:
    value = os.environ.get(ENV_FLAG, "numba").strip().lower()
    if value not in ("numba", "numpy"):
        raise ValueError(f"{ENV_FLAG} must be 'numba' or 'numpy', got {value!r}")
    return value


BACKEND = "numba" if (HAVE_NUMBA and _requested_backend() == "numba") else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if args and callable(args[0]):
        return args[0]
    return wrap
