"""Pure numpy implementations of the hot kernels.

Each function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and bit-identical results; ``lisnownet.kernels`` picks one at import.
"""
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

VERTICAL_MODES = ("replicate", "circular")


def pad_index(size, pad, circular):
    """Source index for every position of an axis padded by ``pad`` on both sides."""
    idx = np.arange(-pad, size + pad)
    if circular:
        return np.mod(idx, size).astype(np.intp)
    return np.clip(idx, 0, size - 1).astype(np.intp)


def _padded(x, kh, kw, vertical):
    h, w = x.shape[-2:]
    rows = pad_index(h, kh // 2, vertical == "circular")
    cols = pad_index(w, kw // 2, True)
    return x[..., rows, :][..., cols]


def im2col(x, kh, kw, vertical="replicate"):
    """(n, c, h, w) -> (n, c*kh*kw, h*w) patch matrix with panoramic padding."""
    n, c, h, w = x.shape
    win = sliding_window_view(_padded(x, kh, kw, vertical), (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, h * w)


def conv_gemm(w2, cols):
    """``w2 @ cols`` per batch item with one fixed summation order for every pixel.

    ``w2`` is (c_out, k), ``cols`` (n, k, p). Terms are added in increasing k,
    so a pixel's result does not depend on where it sits in the image, which
    keeps convolutions exactly equivariant to circular shifts.
    """
    n, k, p = cols.shape
    out = np.zeros((n, w2.shape[0], p), dtype=np.result_type(w2, cols))
    tmp = np.empty_like(out)
    for j in range(k):
        np.multiply(w2[None, :, j, None], cols[:, None, j, :], out=tmp)
        out += tmp
    return out


def _fold(gp, size, pad, circular, axis):
    idx = pad_index(size, pad, circular)
    out = np.take(gp, np.arange(pad, pad + size), axis=axis)
    for k in list(range(pad)) + list(range(pad + size, size + 2 * pad)):
        src = np.take(gp, [k], axis=axis)
        dst = [slice(None)] * gp.ndim
        dst[axis] = slice(idx[k], idx[k] + 1)
        out[tuple(dst)] += src
    return out


def col2im(cols, shape, kh, kw, vertical="replicate"):
    """Adjoint of :func:`im2col`: scatter-add patches back onto the image grid."""
    n, c, h, w = shape
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(n, c, kh, kw, h, w)
    gp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    g = _fold(gp, w, pw, True, axis=3)
    return _fold(g, h, ph, vertical == "circular", axis=2)


def bucket_order(flat, d, npix):
    """Group points by pixel, nearest first (ties by position); returns (order, offsets).

    ``order`` indexes into ``flat``/``d``; pixel ``p`` owns
    ``order[offsets[p]:offsets[p + 1]]``.
    """
    order = np.lexsort((d, flat))
    offsets = np.zeros(npix + 1, dtype=np.intp)
    np.cumsum(np.bincount(flat, minlength=npix), out=offsets[1:])
    return order.astype(np.intp, copy=False), offsets


def masked_median_flags(data, valid, half, tau_d, tau_i):
    """Flag valid pixels darker than their windowed median in both channels.

    ``data`` is (h, w, 2) float64, ``valid`` (h, w) bool. The window is
    (2*half+1)^2, circular along columns and edge-replicated along rows; void
    pixels are left out of the median.
    """
    h, w, _ = data.shape
    k = 2 * half + 1
    rows = pad_index(h, half, False)
    cols = pad_index(w, half, True)
    flags = valid.copy()
    for ch, tau in ((0, tau_d), (1, tau_i)):
        vals = np.where(valid, data[..., ch], np.nan)
        win = sliding_window_view(vals[rows][:, cols], (k, k)).reshape(h, w, k * k)
        # all-nan windows only occur at void centres, which stay unflagged
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(win, axis=-1)
        flags &= data[..., ch] < med - tau
    return flags
