"""Kernel backend selection.

The compiled extension is used when it imports; ``CARMREG_BACKEND=python``
forces the NumPy fallback. ``CARMREG_THREADS`` sets the default worker count.
"""

import os

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _pykernels}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

_requested = os.environ.get("CARMREG_BACKEND", "").strip().lower()
if _requested and _requested not in ("python", "compiled"):
    raise ImportError(f"CARMREG_BACKEND must be 'python' or 'compiled', got {_requested!r}")
if _requested == "compiled" and _compiled is None:
    raise ImportError("CARMREG_BACKEND=compiled but carmreg._kernels is not built")

BACKEND = _requested or ("compiled" if _compiled is not None else "python")
_impl = BACKENDS[BACKEND]


def get(name=None):
    """Kernel module by name (default: the active backend)."""
    return BACKENDS[name or BACKEND]


def default_threads() -> int:
    env = os.environ.get("CARMREG_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"CARMREG_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ValueError("CARMREG_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def trilinear_many(mu, idx, backend=None):
    return get(backend).trilinear_many(mu, idx)


def render_rays(*args, backend=None):
    return get(backend).render_rays(*args)
