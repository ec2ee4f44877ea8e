"""Numba switch.

Hot kernels are compiled with numba when it is importable, unless the
environment variable ``KF_MINSET_NO_JIT`` is set to a truthy value, in which
case the vectorised numpy implementations are used instead.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

_FALSY = ("", "0", "false", "no", "off")

JIT_REQUESTED = os.environ.get("KF_MINSET_NO_JIT", "").strip().lower() in _FALSY
JIT_AVAILABLE = numba is not None
JIT_ENABLED = JIT_REQUESTED and JIT_AVAILABLE


def njit(fn=None, **options):
    """Compile ``fn`` with numba in nopython mode, or return it untouched.

    Usable bare (``@njit``) or with extra numba options (``@njit(fastmath=True)``).
    """
    if fn is None:
        return lambda f: njit(f, **options)
    if not JIT_AVAILABLE:
        return fn
    return numba.njit(cache=True, nogil=True, **options)(fn)


def resolve_backend(backend=None):
    """Map an explicit backend request (``"jit"``, ``"numpy"`` or None) to the one to run."""
    if backend is None:
        return "jit" if JIT_ENABLED else "numpy"
    if backend not in ("jit", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "jit" and not JIT_AVAILABLE:
        raise RuntimeError("numba is not installed")
    return backend
