"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise, or
when ``LISNOWNET_PURE_PYTHON=1`` is set, the numpy fallback is used. Both
backends return bit-identical results.
"""
import os

import numpy as np

from lisnownet import _pykernels

try:
    from lisnownet import _ckernels
except ImportError:  # extension not built
    _ckernels = None

__all__ = ["BACKEND", "available_backends", "use_backend", "im2col", "col2im", "conv_gemm", "bucket_order", "masked_median_flags"]

_impl = _pykernels
BACKEND = "python"


def available_backends():
    return ["cython", "python"] if _ckernels is not None else ["python"]


def use_backend(name):
    """Switch kernels at runtime; returns the previously active backend name."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available; build with `pip install -e .`")
        _impl = _ckernels
    elif name == "python":
        _impl = _pykernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return previous


if _ckernels is not None and os.environ.get("LISNOWNET_PURE_PYTHON", "") in ("", "0"):
    use_backend("cython")


def im2col(x, kh, kw, vertical="replicate"):
    return _impl.im2col(np.ascontiguousarray(x), kh, kw, vertical)


def col2im(cols, shape, kh, kw, vertical="replicate"):
    return _impl.col2im(np.ascontiguousarray(cols), tuple(shape), kh, kw, vertical)


def conv_gemm(w2, cols):
    return _impl.conv_gemm(np.ascontiguousarray(w2), np.ascontiguousarray(cols))


def bucket_order(flat, d, npix):
    flat = np.ascontiguousarray(flat, dtype=np.intp)
    return _impl.bucket_order(flat, np.ascontiguousarray(d, dtype=np.float64), int(npix))


def masked_median_flags(data, valid, half, tau_d, tau_i):
    data = np.ascontiguousarray(data, dtype=np.float64)
    return _impl.masked_median_flags(data, np.asarray(valid, dtype=bool), int(half), float(tau_d), float(tau_i))
