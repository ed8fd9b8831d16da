"""Convolution kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
NumPy implementation is used.  Force a choice with DIVGATE_KERNELS=compiled
or DIVGATE_KERNELS=numpy (useful for the benchmark and parity tests).
"""
import os

from . import _conv_numpy

_choice = os.environ.get("DIVGATE_KERNELS", "auto")

if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(f"DIVGATE_KERNELS must be auto/compiled/numpy, got {_choice!r}")

if _choice == "numpy":
    _impl = _conv_numpy
else:
    try:
        from . import _conv_cy as _impl
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = _conv_numpy

BACKEND = _impl.BACKEND
conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight
# patch-matrix reuse between forward and weight gradient; compiled-only
conv2d_forward_cols = getattr(_impl, "conv2d_forward_cols", None)
conv2d_grad_weight_cols = getattr(_impl, "conv2d_grad_weight_cols", None)


def implementations():
    """Return {name: module} for every importable backend."""
    impls = {"numpy": _conv_numpy}
    try:
        from . import _conv_cy
        impls["compiled"] = _conv_cy
    except ImportError:
        pass
    return impls
