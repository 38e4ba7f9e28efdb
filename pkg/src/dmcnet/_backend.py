"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the NumPy
fallback. ``DMCNET_BACKEND=numpy`` forces the fallback (``compiled`` forces the
extension and fails loudly if it is missing).
"""

import os

from . import _conv_py

try:
    from . import _conv_ext
except ImportError:  # extension not built
    _conv_ext = None

_BACKENDS = {"numpy": _conv_py}
if _conv_ext is not None:
    _BACKENDS["compiled"] = _conv_ext


def _initial():
    wanted = os.environ.get("DMCNET_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in _BACKENDS:
            raise ImportError(
                f"DMCNET_BACKEND={wanted!r} unavailable; have {sorted(_BACKENDS)}"
            )
        return wanted
    return "compiled" if "compiled" in _BACKENDS else "numpy"


_active = _initial()


def available():
    return sorted(_BACKENDS)


def name():
    return _active


def kernels():
    return _BACKENDS[_active]


def set_backend(backend):
    """Switch kernels globally; returns the previous backend name."""
    global _active
    if backend not in _BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; have {sorted(_BACKENDS)}")
    previous, _active = _active, backend
    return previous
