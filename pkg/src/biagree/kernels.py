"""Inference kernel selection.

The compiled backend is used when the extension is importable; setting
``BIAGREE_PURE_PYTHON=1`` forces the numpy fallback.  ``use_backend`` switches
at runtime (tests and the benchmark compare both).
"""
import os

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _kernels_py}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if _ckernels is not None and not os.environ.get("BIAGREE_PURE_PYTHON"):
    BACKEND = "cython"
else:
    BACKEND = "python"
_impl = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Select the kernel backend; returns the previous backend name."""
    global BACKEND, _impl
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    prev, BACKEND, _impl = BACKEND, name, _BACKENDS[name]
    return prev


def encode(P, src_ids):
    return _impl.encode(P, src_ids)


def decoder_step(P, H, K, prev_ids, S):
    return _impl.decoder_step(P, H, K, prev_ids, S)
