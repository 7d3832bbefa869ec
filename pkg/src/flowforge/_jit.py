"""Numba switch.

Hot kernels are written once, in loop form, and decorated with :func:`njit`.
Set ``FLOWFORGE_DISABLE_JIT=1`` (or run without numba installed) and the
decorator becomes the identity, so the same source runs as plain Python over
numpy arrays. Results are identical on both paths; only speed differs.
"""

import os

_FLAG = os.environ.get("FLOWFORGE_DISABLE_JIT", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    import numba
except ImportError:
    numba = None

JIT_ENABLED = numba is not None
BACKEND = "numba" if JIT_ENABLED else "python"


def njit(*args, **kwargs):
    if JIT_ENABLED:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        # Kernels never allocate. Without the runtime, array arguments to
        # helper calls are not refcounted, which costs ~10x in the hot loop.
        kwargs.setdefault("_nrt", False)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def _identity(f):
        return f
    return _identity
