"""Kernel backend selection.

The compiled Cython kernels are used when importable; otherwise the NumPy
fallback is.  ``LNPRUNE_PURE_PYTHON=1`` forces the fallback at import time
and :func:`use_backend` switches temporarily (tests, benchmarks).
"""
import contextlib
import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_active = _kernels_py
if _compiled is not None and os.environ.get("LNPRUNE_PURE_PYTHON", "") in ("", "0"):
    _active = _compiled


def available():
    return sorted(_BACKENDS)


def name():
    return "cython" if _active is _compiled and _compiled is not None else "python"


def set_backend(backend):
    global _active
    if backend not in _BACKENDS:
        raise ValueError(f"backend {backend!r} not available; have {available()}")
    _active = _BACKENDS[backend]


@contextlib.contextmanager
def use_backend(backend):
    previous = name()
    set_backend(backend)
    try:
        yield
    finally:
        set_backend(previous)


def im2col(x, k, stride, pad):
    return _active.im2col(x, k, stride, pad)


def col2im(cols, N, C, H, W, k, stride, pad):
    return _active.col2im(cols, N, C, H, W, k, stride, pad)


def maxpool_forward(x, window, stride):
    return _active.maxpool_forward(x, window, stride)


def maxpool_backward(grad_out, argmax, H, W):
    return _active.maxpool_backward(grad_out, argmax, H, W)
