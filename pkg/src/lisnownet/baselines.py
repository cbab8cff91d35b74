"""Neighbour-search and image-filter baselines for snow removal.

DROR and DSOR follow the published descriptions of the dynamic radius and
dynamic statistical outlier removal filters; all parameters are
configuration. Neighbour queries use an exact kd-tree (scipy), so masks match
a brute-force search. ``True`` in a returned mask means snow / outlier.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from lisnownet import kernels
from lisnownet.cloud_io import PointCloud
from lisnownet.range_image import ProjectionConfig, RangeImage, compress, point_mask, project


class TooFewPointsError(ValueError):
    pass


@dataclass(frozen=True)
class DrorConfig:
    radius_multiplier: float = 3.0
    azimuth_resolution: float = 2 * math.pi / 2048
    min_radius: float = 0.04
    min_neighbors: int = 3

    def __post_init__(self):
        if min(self.radius_multiplier, self.azimuth_resolution, self.min_radius, self.min_neighbors) <= 0:
            raise ValueError("DROR parameters must be positive")


@dataclass(frozen=True)
class DsorConfig:
    k_neighbors: int = 5
    stddev_multiplier: float = 0.01
    range_multiplier: float = 0.05

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.stddev_multiplier <= 0 or self.range_multiplier <= 0:
            raise ValueError("DSOR multipliers must be positive")


@dataclass(frozen=True)
class MedianConfig:
    window: int = 5
    tau_d: float = 0.05
    tau_i: float = 0.05

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("median window must be a positive odd size")
        if self.tau_d <= 0 or self.tau_i <= 0:
            raise ValueError("median margins must be positive")


def _xyz(cloud):
    return np.asarray(cloud.xyz if isinstance(cloud, PointCloud) else cloud, dtype=np.float64)[:, :3]


def dror_radii(xyz, cfg: DrorConfig):
    ranges = np.linalg.norm(xyz, axis=1)
    return np.maximum(cfg.min_radius, cfg.radius_multiplier * ranges * cfg.azimuth_resolution)


def dror(cloud, cfg: DrorConfig = DrorConfig()):
    """Outlier iff fewer than ``min_neighbors`` other points lie within the point's radius."""
    xyz = _xyz(cloud)
    if len(xyz) == 0:
        return np.zeros(0, dtype=bool)
    tree = cKDTree(xyz)
    counts = tree.query_ball_point(xyz, dror_radii(xyz, cfg), return_length=True) - 1
    return counts < cfg.min_neighbors


def _neighbor_distances(xyz, idx):
    """Distances from each point to the given neighbour indices, sorted ascending."""
    diff = xyz[idx] - xyz[:, None, :]
    return np.sort(np.sqrt((diff * diff).sum(axis=-1)), axis=1)


def dsor_scores(xyz, cfg: DsorConfig):
    """Mean distance of each point to its k nearest neighbours (self excluded)."""
    k = cfg.k_neighbors
    _, idx = cKDTree(xyz).query(xyz, k=k + 1)
    # recompute distances so rounding does not depend on the tree internals;
    # the self match contributes the leading zero and is dropped
    d = _neighbor_distances(xyz, idx)
    return d[:, 1:].sum(axis=1) / k


def dsor(cloud, cfg: DsorConfig = DsorConfig()):
    """Outlier iff mean k-NN distance exceeds ``(mu + s * sigma) * r * range``."""
    xyz = _xyz(cloud)
    if len(xyz) <= cfg.k_neighbors:
        raise TooFewPointsError(f"DSOR needs more than {cfg.k_neighbors} points, got {len(xyz)}")
    mean_d = dsor_scores(xyz, cfg)
    global_t = mean_d.mean() + cfg.stddev_multiplier * mean_d.std()
    dynamic_t = global_t * cfg.range_multiplier * np.linalg.norm(xyz, axis=1)
    return mean_d > dynamic_t


def median_filter(img: RangeImage, cfg: MedianConfig = MedianConfig()):
    """Pixels darker than their windowed median by a margin in both channels.

    Works on cube-root scaled images. Only measured pixels enter the window and
    only measured pixels can be flagged, so the output is the same whether or
    not voids were filled beforehand. Brighter-than-median pixels are never
    flagged.
    """
    return kernels.masked_median_flags(img.data, img.valid, cfg.window // 2, cfg.tau_d, cfg.tau_i)


def median_point_mask(cloud, cfg: MedianConfig = MedianConfig(), proj_cfg: ProjectionConfig = ProjectionConfig()):
    """Per-point median-filter decision straight from a cloud."""
    img = compress(project(cloud, proj_cfg))
    return point_mask(img, median_filter(img, cfg))
