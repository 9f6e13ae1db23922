"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy versions in ``_fallback`` take over.  Set ``KMFUSION_PURE_PYTHON=1``
to force the fallback, or call :func:`use_backend` at runtime.
"""

import os

from . import _fallback

try:
    if os.environ.get("KMFUSION_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("compiled kernels disabled by KMFUSION_PURE_PYTHON")
    from . import _ckernels as _compiled
except ImportError:
    _compiled = None

_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_active = _BACKENDS.get("cython", _fallback)


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return "cython" if _active is _compiled and _compiled is not None else "python"


def use_backend(name):
    """Switch the active backend; returns the previous backend name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    prev = backend_name()
    _active = _BACKENDS[name]
    return prev


def bspline_basis(x, lo, h, intervals, degree):
    return _active.bspline_basis(x, lo, h, intervals, degree)


def scan_forward(u, delta, A, B, C, D):
    return _active.scan_forward(u, delta, A, B, C, D)


def scan_backward(gy, u, delta, A, B, C, D, hs):
    return _active.scan_backward(gy, u, delta, A, B, C, D, hs)
