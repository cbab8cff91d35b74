"""Sparsifying transforms: single-level orthonormal 2D Haar and FFT log-magnitude.

Public functions take channel-last ``(h, w, c)`` grids. The ``haar_analysis`` /
``haar_synthesis`` pair works on the last two axes of any array and is what
the network layers call directly.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np


class Subbands(NamedTuple):
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray


def haar_analysis(x):
    """Split the last two axes into 2x2 blocks ``[[a, b], [c, d]]``.

    Returns ``(ll, hl, lh, hh)`` with ll=(a+b+c+d)/2, hl=(a+b-c-d)/2,
    lh=(a-b+c-d)/2, hh=(a-b-c+d)/2.
    """
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"Haar transform needs even spatial dims, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    s_top, d_top = a + b, a - b
    s_bot, d_bot = c + d, c - d
    return (s_top + s_bot) / 2, (s_top - s_bot) / 2, (d_top + d_bot) / 2, (d_top - d_bot) / 2


def haar_synthesis(ll, hl, lh, hh):
    if not (ll.shape == hl.shape == lh.shape == hh.shape):
        raise ValueError("subband shapes differ")
    out = np.empty(ll.shape[:-2] + (2 * ll.shape[-2], 2 * ll.shape[-1]), dtype=np.result_type(ll, hl, lh, hh))
    s_top, s_bot = ll + hl, ll - hl
    d_top, d_bot = lh + hh, lh - hh
    out[..., 0::2, 0::2] = (s_top + d_top) / 2
    out[..., 0::2, 1::2] = (s_top - d_top) / 2
    out[..., 1::2, 0::2] = (s_bot + d_bot) / 2
    out[..., 1::2, 1::2] = (s_bot - d_bot) / 2
    return out


def dwt2_haar(img) -> Subbands:
    """One level of the orthonormal 2D Haar DWT of an ``(h, w, c)`` grid."""
    x = np.moveaxis(np.asarray(img, dtype=float), -1, 0)
    ll, hl, lh, hh = haar_analysis(x)
    return Subbands(*(np.moveaxis(s, 0, -1) for s in (ll, lh, hl, hh)))


def idwt2_haar(sb: Subbands):
    ll, lh, hl, hh = (np.moveaxis(np.asarray(s, dtype=float), -1, 0) for s in sb)
    return np.moveaxis(haar_synthesis(ll, hl, lh, hh), 0, -1)


def pack_subbands(sb: Subbands):
    """Tile subbands into one grid of the input's shape as ``[[ll, hl], [lh, hh]]``."""
    top = np.concatenate([sb.ll, sb.hl], axis=1)
    bottom = np.concatenate([sb.lh, sb.hh], axis=1)
    return np.concatenate([top, bottom], axis=0)


def unpack_subbands(grid) -> Subbands:
    h, w = grid.shape[0] // 2, grid.shape[1] // 2
    return Subbands(ll=grid[:h, :w], lh=grid[h:, :w], hl=grid[:h, w:], hh=grid[h:, w:])


def fft2_logmag(img, norm="backward"):
    """``log(|FFT2(img)| + 1)`` per channel, full spectrum, same shape as ``img``.

    ``norm`` follows numpy: "backward" is the plain DFT sum, "ortho" scales
    by ``1/sqrt(h*w)`` so the transform is unitary.
    """
    if norm not in ("backward", "ortho"):
        raise ValueError(f"unsupported FFT norm {norm!r}")
    spectrum = np.fft.fft2(np.asarray(img, dtype=float), axes=(0, 1), norm=norm)
    return np.log1p(np.abs(spectrum))
