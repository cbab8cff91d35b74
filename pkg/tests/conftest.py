import numpy as np
import pytest

from lisnownet import kernels


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` at ``x`` (float64 array)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f(x)
        x[idx] = old - eps
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4):
    scale = max(np.abs(numeric).max(), 1e-8)
    err = np.abs(analytic - numeric).max() / scale
    assert err < rtol, f"relative gradient error {err:.3g}"


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)
