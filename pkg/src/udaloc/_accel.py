"""Optional numba acceleration.

Set ``UDALOC_DISABLE_NUMBA=1`` to force the pure-numpy kernels (useful for
debugging and for the kernel benchmark). When numba is not importable the
numpy path is used automatically.
"""
import os

_DISABLED = os.environ.get("UDALOC_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    _njit = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
