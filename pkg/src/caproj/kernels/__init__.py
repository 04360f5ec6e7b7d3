"""Conv patch kernels with a backend selected at import.

The compiled Cython extension is preferred when present; the pure-numpy
backend is the fallback. Both produce bit-identical results. Selection
can be forced with the ``CAPROJ_KERNELS`` environment variable
(``compiled`` | ``python`` | ``auto``) or at runtime via
:func:`set_backend` (used by the benchmark and tests).
"""

import os

from . import python_backend

try:
    from . import _core
except ImportError:
    _core = None

_BACKENDS = {"python": python_backend}
if _core is not None:
    _BACKENDS["compiled"] = _core


def _initial_backend():
    forced = os.environ.get("CAPROJ_KERNELS", "auto").strip().lower()
    if forced in ("", "auto"):
        return _BACKENDS.get("compiled", python_backend)
    if forced not in _BACKENDS:
        if forced == "compiled":
            raise ImportError(
                "CAPROJ_KERNELS=compiled but the extension is not built; "
                "run: python setup.py build_ext --inplace"
            )
        raise ValueError(f"unknown CAPROJ_KERNELS value: {forced!r}")
    return _BACKENDS[forced]


_active = _initial_backend()


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active.BACKEND


def set_backend(name):
    """Switch the active backend. Returns the previous backend name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    previous = _active.BACKEND
    _active = _BACKENDS[name]
    return previous


def im2col(x_padded, k, stride, oh, ow):
    return _active.im2col(x_padded, k, stride, oh, ow)


def col2im(cols, n, c, hp, wp, k, stride, oh, ow):
    return _active.col2im(cols, n, c, hp, wp, k, stride, oh, ow)
