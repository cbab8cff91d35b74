"""Turning network residuals into per-point snow decisions.

The network predicts ``delta`` with ``clean = image - delta``. The sparsity
losses are smallest when ``clean`` vanishes, so training drives ``delta``
towards a reconstruction of the image; what the network fails to reproduce
are isolated returns that are closer and darker than the surface around
them. The decision rule below is therefore applied to the foreground
residual ``delta - image`` (that is ``-clean``), positive where a pixel lies
in front of and below the reconstructed surface. :func:`snow_residual`
computes it and every pipeline in this module goes through it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from lisnownet import autodiff as ad
from lisnownet.cloud_io import DEFAULT_SNOW_IDS, PointCloud
from lisnownet.evalbench import ConfusionCounts, evaluate
from lisnownet.model import NetworkConfig, forward
from lisnownet.range_image import ProjectionConfig, RangeImage, apply_mask, point_mask, preprocess


@dataclass(frozen=True)
class Thresholds:
    n_d: float = 1.0
    n_i: float = 1.0
    delta_bar: float = 1e-3

    def __post_init__(self):
        if min(self.n_d, self.n_i, self.delta_bar) <= 0:
            raise ValueError("thresholds must be strictly positive")


def classify(residual, th: Thresholds = Thresholds()):
    """Snow where both channels are positive and ``r_d**n_d * r_i**n_i > delta_bar``.

    ``residual`` is an (h, w, 2) grid of foreground residuals (distance,
    intensity). All three inequalities are strict.
    """
    residual = np.asarray(residual)
    rd, ri = residual[..., 0], residual[..., 1]
    positive = (rd > 0) & (ri > 0)
    score = np.zeros(rd.shape, dtype=np.float64)
    score[positive] = rd[positive] ** th.n_d * ri[positive] ** th.n_i
    return positive & (score > th.delta_bar)


def snow_residual(image, delta):
    """Foreground residual ``delta - image`` of an (h, w, 2) grid.

    With an untrained (all-zero) residual this is ``-image <= 0``, so nothing
    is classified as snow.
    """
    return np.asarray(delta) - np.asarray(image)


def predict_delta(params, img: RangeImage, net_cfg: NetworkConfig = NetworkConfig()):
    """Network residual for one preprocessed image, as an (h, w, 2) grid."""
    dtype = next(iter(params.items()))[1].dtype
    x = np.moveaxis(img.data, -1, 0)[None].astype(dtype)
    with ad.no_grad():
        delta = forward(params, x, net_cfg, training=False).data
    return np.moveaxis(delta[0], 0, -1)


def snow_pixels(
    params,
    th: Thresholds,
    cloud: PointCloud,
    proj_cfg: ProjectionConfig = ProjectionConfig(),
    net_cfg: NetworkConfig = NetworkConfig(),
):
    """Preprocess, predict and classify; returns (image, foreground residual, pixel mask)."""
    img = preprocess(cloud, proj_cfg)
    residual = snow_residual(img.data, predict_delta(params, img, net_cfg))
    return img, residual, classify(residual, th)


def snow_mask(params, th, cloud, proj_cfg=ProjectionConfig(), net_cfg=NetworkConfig()):
    """Per-point snow decision for ``cloud``."""
    img, _, pixels = snow_pixels(params, th, cloud, proj_cfg, net_cfg)
    return point_mask(img, pixels)


def denoise(
    params,
    th: Thresholds,
    cloud: PointCloud,
    proj_cfg: ProjectionConfig = ProjectionConfig(),
    net_cfg: NetworkConfig = NetworkConfig(),
):
    """Split ``cloud`` into (kept, removed, stats)."""
    img, residual, pixels = snow_pixels(params, th, cloud, proj_cfg, net_cfg)
    kept, removed = apply_mask(cloud, img, pixels)
    valid = residual[img.valid]
    stats = {
        "points": len(cloud),
        "kept": len(kept),
        "removed": len(removed),
        "dropped": img.dropped,
        "snow_pixels": int(pixels.sum()),
        "residual_d_mean": float(valid[:, 0].mean()) if valid.size else 0.0,
        "residual_i_mean": float(valid[:, 1].mean()) if valid.size else 0.0,
        "residual_d_max": float(valid[:, 0].max()) if valid.size else 0.0,
        "residual_i_max": float(valid[:, 1].max()) if valid.size else 0.0,
    }
    return kept, removed, stats


def default_grid():
    return {
        "n_d": [0.5, 1.0, 2.0],
        "n_i": [0.5, 1.0, 2.0],
        "delta_bar": np.logspace(-12, 1, 105).tolist(),
    }


def _labeled_residuals(params, frames, proj_cfg, net_cfg):
    out = []
    for cloud in frames:
        if cloud.labels is None:
            raise ValueError(f"frame {cloud.frame_id or '?'} has no labels")
        img = preprocess(cloud, proj_cfg)
        out.append((img, snow_residual(img.data, predict_delta(params, img, net_cfg)), cloud.labels))
    return out


def tune_thresholds(
    params,
    labeled_frames,
    grid=None,
    snow_ids=DEFAULT_SNOW_IDS,
    proj_cfg: ProjectionConfig = ProjectionConfig(),
    net_cfg: NetworkConfig = NetworkConfig(),
):
    """Exhaustive search for the thresholds with the best pooled IoU.

    Ties go to higher precision, then lower ``delta_bar``. Returns the winner
    and the full table of ``(Thresholds, ConfusionCounts)`` rows.
    """
    grid = default_grid() if grid is None else grid
    candidates = [
        Thresholds(n_d, n_i, db)
        for n_d, n_i, db in itertools.product(grid["n_d"], grid["n_i"], grid["delta_bar"])
    ]
    if not candidates:
        raise ValueError("empty threshold grid")
    frames = list(labeled_frames)
    if not frames:
        raise ValueError("no labeled frames to tune on")
    prepared = _labeled_residuals(params, frames, proj_cfg, net_cfg)
    return select_thresholds(prepared, candidates, snow_ids)


def select_thresholds(prepared, candidates, snow_ids=DEFAULT_SNOW_IDS):
    """Score every candidate on ``(image, residual, labels)`` triples."""
    table = []
    for th in candidates:
        total = ConfusionCounts()
        for img, residual, labels in prepared:
            pred = point_mask(img, classify(residual, th))
            total = total + evaluate(pred, labels, snow_ids)
        table.append((th, total))
    best = max(table, key=lambda row: (row[1].iou, row[1].precision, -row[0].delta_bar))
    return best[0], table
