"""Optional numba acceleration.

Hot kernels are written once in plain numpy-compatible Python and compiled
with ``numba.njit`` unless ``LWE_ATTACK_NO_JIT=1`` is set in the environment
(or numba is not importable). The uncompiled path runs the exact same code.
"""

import os

_DISABLED = os.environ.get("LWE_ATTACK_NO_JIT", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    import numba

    JIT_ENABLED = True
except ImportError:  # pragma: no cover - depends on environment
    numba = None
    JIT_ENABLED = False


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is enabled, identity otherwise."""
    if JIT_ENABLED:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
