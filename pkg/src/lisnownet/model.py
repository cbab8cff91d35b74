"""The residual denoising network and its sparsity losses.

The network is a multi-level wavelet U-shape: Haar DWT replaces pooling on
the way down, IDWT replaces transposed convolution on the way up, and each
level runs residual blocks of two panoramic 3x3 convolutions with ReLU and
dropout in between. It predicts a residual ``delta`` so that
``clean = image - delta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lisnownet import autodiff as ad
from lisnownet.autodiff import ParamStore, RngState, Tensor


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 4
    base_channels: int = 8
    blocks_per_level: int = 2
    dropout_p: float = 0.1
    kernel: int = 3
    in_channels: int = 2
    vertical_padding: str = "replicate"

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.base_channels < 2:
            raise ValueError("base_channels must be >= 2")
        if self.blocks_per_level < 1:
            raise ValueError("blocks_per_level must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.vertical_padding not in ("replicate", "circular"):
            raise ValueError(f"unknown vertical padding {self.vertical_padding!r}")

    def channels(self, level):
        return self.base_channels * 2 ** level

    @property
    def divisor(self):
        return 2 ** (self.levels - 1)

    def check_input(self, h, w):
        if h % self.divisor or w % self.divisor:
            raise ValueError(
                f"input {h}x{w} must be divisible by {self.divisor} for a {self.levels}-level network"
            )


def _conv_param(store, rng, name, c_in, c_out, k, zero=False):
    # Kaiming-uniform with negative slope sqrt(5), i.e. bound 1/sqrt(fan_in); the
    # ReLU gain sqrt(6/fan_in) compounds across the un-normalised residual stack
    fan_in = c_in * k * k
    bound = 1.0 / math.sqrt(fan_in)
    w = np.zeros((c_out, c_in, k, k)) if zero else rng.uniform(-bound, bound, (c_out, c_in, k, k))
    store.add(f"{name}.weight", w)
    store.add(f"{name}.bias", np.zeros(c_out))


def init_params(cfg: NetworkConfig = NetworkConfig(), seed=0, dtype=np.float64) -> ParamStore:
    """Kaiming-uniform kernels, zero biases, and a zeroed output convolution.

    With the output convolution at zero the untrained network predicts
    ``delta == 0``, i.e. it starts as the identity denoiser.
    """
    rng = RngState(seed)
    store = ParamStore()
    k = cfg.kernel

    def block(prefix, c):
        _conv_param(store, rng, f"{prefix}.conv1", c, c, k)
        _conv_param(store, rng, f"{prefix}.conv2", c, c, k)

    _conv_param(store, rng, "head", cfg.in_channels, cfg.channels(0), k)
    for lvl in range(cfg.levels - 1):
        for b in range(cfg.blocks_per_level):
            block(f"enc{lvl}.block{b}", cfg.channels(lvl))
        _conv_param(store, rng, f"down{lvl}", 4 * cfg.channels(lvl), cfg.channels(lvl + 1), k)
    for b in range(cfg.blocks_per_level):
        block(f"mid.block{b}", cfg.channels(cfg.levels - 1))
    for lvl in reversed(range(cfg.levels - 1)):
        _conv_param(store, rng, f"up{lvl}", cfg.channels(lvl + 1), 4 * cfg.channels(lvl), k)
        for b in range(cfg.blocks_per_level):
            block(f"dec{lvl}.block{b}", cfg.channels(lvl))
    _conv_param(store, rng, "tail", cfg.channels(0), cfg.in_channels, k, zero=True)
    return store.astype(dtype) if dtype != np.float64 else store


def forward(params: ParamStore, x, cfg: NetworkConfig = NetworkConfig(), rng: RngState | None = None, training=False):
    """Predict the residual for a batch ``x`` of shape (n, 2, h, w)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    cfg.check_input(*x.shape[2:])
    if training and cfg.dropout_p > 0 and rng is None:
        raise ValueError("training with dropout needs an RngState")

    def conv(name, t):
        return ad.conv2d_circular(t, params[f"{name}.weight"], params[f"{name}.bias"], cfg.vertical_padding)

    def block(prefix, t):
        y = ad.relu(conv(f"{prefix}.conv1", t))
        y = ad.dropout(y, cfg.dropout_p, rng, training)
        return t + conv(f"{prefix}.conv2", y)

    h = conv("head", x)
    skips = []
    for lvl in range(cfg.levels - 1):
        for b in range(cfg.blocks_per_level):
            h = block(f"enc{lvl}.block{b}", h)
        skips.append(h)
        h = conv(f"down{lvl}", ad.dwt_layer(h))
    for b in range(cfg.blocks_per_level):
        h = block(f"mid.block{b}", h)
    for lvl in reversed(range(cfg.levels - 1)):
        h = ad.idwt_layer(conv(f"up{lvl}", h)) + skips[lvl]
        for b in range(cfg.blocks_per_level):
            h = block(f"dec{lvl}.block{b}", h)
    return conv("tail", h)


@dataclass(frozen=True)
class LossWeights:
    """``alpha`` trades image sparsity against residual sparsity; ``beta`` mixes FFT vs DWT.

    ``fft_norm`` scales the spectrum in the FFT term. With the unitary
    ("ortho") scaling most coefficients of a range image are below one, where
    ``log(1 + x)`` behaves like ``x``; with the plain DFT sum the coefficients
    grow with the image size and the log mostly rewards shrinking the whole
    image.
    """

    alpha: float = 0.9779
    beta: float = 0.5
    fft_norm: str = "ortho"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must be in [0, 1]")
        if self.fft_norm not in ("backward", "ortho"):
            raise ValueError(f"fft_norm must be 'backward' or 'ortho', got {self.fft_norm!r}")


def compute_loss(img, delta, weights: LossWeights = LossWeights()):
    """Total loss and its parts for a batch.

    ``clean = img - delta``; the parts are batch means of the L1 norm of the
    FFT log-magnitude of ``clean``, of its single-level Haar subbands, and of
    ``delta``. The total is ``alpha * (beta * fft + (1 - beta) * dwt) +
    (1 - alpha) * residual``; ``beta = 0.5`` is the even mix, with the factor
    one half folded into ``alpha``.
    """
    if not isinstance(img, Tensor):
        img = Tensor(img)
    if img.shape != delta.shape:
        raise ValueError(f"image {img.shape} and residual {delta.shape} differ")
    inv_n = 1.0 / img.shape[0]
    clean = img - delta
    l_fft = ad.l1_sum(ad.fft2_logmag(clean, weights.fft_norm)) * inv_n
    l_dwt = ad.l1_sum(ad.dwt_layer(clean)) * inv_n
    l_res = ad.l1_sum(delta) * inv_n
    a, b = weights.alpha, weights.beta
    total = l_fft * (a * b) + l_dwt * (a * (1.0 - b)) + l_res * (1.0 - a)
    parts = {"fft": l_fft.item(), "dwt": l_dwt.item(), "residual": l_res.item()}
    return total, parts


def to_batch(images):
    """Stack channel-last range image grids into an (n, 2, h, w) array."""
    return np.stack([np.moveaxis(np.asarray(im), -1, 0) for im in images])
