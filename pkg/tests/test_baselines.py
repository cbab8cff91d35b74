import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lisnownet.baselines import (
    DrorConfig,
    DsorConfig,
    MedianConfig,
    TooFewPointsError,
    dror,
    dsor,
    median_filter,
    median_point_mask,
)
from lisnownet.cloud_io import PointCloud
from lisnownet.range_image import ProjectionConfig, RangeImage, compress, fill_voids, project


def brute_dror(xyz, cfg):
    n = len(xyz)
    out = np.zeros(n, bool)
    for i in range(n):
        rng_i = math.sqrt(sum(float(v) ** 2 for v in xyz[i]))
        r = max(cfg.min_radius, cfg.radius_multiplier * rng_i * cfg.azimuth_resolution)
        d = np.sqrt(((xyz - xyz[i]) ** 2).sum(axis=1))
        count = int(np.sum(d <= r)) - 1
        out[i] = count < cfg.min_neighbors
    return out


def brute_dsor(xyz, cfg):
    n, k = len(xyz), cfg.k_neighbors
    mean_d = np.empty(n)
    for i in range(n):
        d = np.sqrt(((xyz - xyz[i]) ** 2).sum(axis=1))
        d = np.sort(np.delete(d, i))[:k]
        total = 0.0
        for v in d:
            total += v
        mean_d[i] = total / k
    mu = sum(mean_d) / n
    sigma = math.sqrt(sum((m - mu) ** 2 for m in mean_d) / n)
    ranges = np.sqrt((xyz ** 2).sum(axis=1))
    return mean_d > (mu + cfg.stddev_multiplier * sigma) * cfg.range_multiplier * ranges


def random_cloud(seed):
    """Clusters of varying density plus sparse scatter, 200-2000 points."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(200, 2001))
    n_scatter = int(n * rng.uniform(0.05, 0.3))
    centers = rng.uniform(-30, 30, (int(rng.integers(2, 6)), 3))
    which = rng.integers(0, len(centers), n - n_scatter)
    dense = centers[which] + rng.normal(scale=rng.uniform(0.05, 0.5), size=(n - n_scatter, 3))
    scatter = rng.uniform(-30, 30, (n_scatter, 3))
    return np.vstack([dense, scatter])


DROR_CONFIGS = [
    DrorConfig(),
    DrorConfig(radius_multiplier=20.0, min_radius=0.2, min_neighbors=2),
    DrorConfig(radius_multiplier=50.0, azimuth_resolution=math.radians(0.4), min_radius=0.1, min_neighbors=5),
]
DSOR_CONFIGS = [
    DsorConfig(),
    DsorConfig(k_neighbors=3, stddev_multiplier=1.0, range_multiplier=0.1),
    DsorConfig(k_neighbors=8, stddev_multiplier=0.5, range_multiplier=0.02),
]


@pytest.mark.parametrize("cfg", DROR_CONFIGS)
def test_dror_matches_brute_force(cfg):
    flagged = kept = 0
    for seed in range(20):
        xyz = random_cloud(seed)
        got = dror(xyz, cfg)
        np.testing.assert_array_equal(got, brute_dror(xyz, cfg))
        flagged += got.sum()
        kept += (~got).sum()
    assert flagged and kept


@pytest.mark.parametrize("cfg", DSOR_CONFIGS)
def test_dsor_matches_brute_force(cfg):
    flagged = kept = 0
    for seed in range(20):
        xyz = random_cloud(100 + seed)
        got = dsor(xyz, cfg)
        np.testing.assert_array_equal(got, brute_dsor(xyz, cfg))
        flagged += got.sum()
        kept += (~got).sum()
    assert flagged and kept


def test_dror_examples():
    assert dror(np.array([[100.0, 0, 0], [0, 0, 0.5], [0, 0.01, 0.5], [0.01, 0, 0.5], [0, 0, 0.51]]))[0]
    assert dror(np.zeros((0, 3))).shape == (0,)
    g = np.arange(3) * 0.01
    cube = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3) + [5.0, 0, 0]
    assert not dror(cube).any()
    assert not brute_dror(cube, DrorConfig()).any()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), lo=st.integers(1, 6), extra=st.integers(0, 6))
def test_dror_monotone_in_min_neighbors(seed, lo, extra):
    xyz = random_cloud(seed)
    base = dict(radius_multiplier=20.0, min_radius=0.2)
    a = dror(xyz, DrorConfig(min_neighbors=lo, **base))
    b = dror(xyz, DrorConfig(min_neighbors=lo + extra, **base))
    assert np.all(b[a])


def _lattice(origin, spacing=0.1, shape=(10, 10, 3)):
    axes = [np.arange(s) * spacing for s in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3) + origin


def test_dsor_lattice_and_displaced_point():
    lattice = _lattice([40.0, 0.0, 0.0])
    assert not dsor(lattice).any()
    assert not brute_dsor(lattice, DsorConfig()).any()
    cloud = np.vstack([lattice, [39.0, 0.0, 0.0]])  # 10 spacings in front of the corner
    got = dsor(cloud)
    np.testing.assert_array_equal(got, brute_dsor(cloud, DsorConfig()))
    assert got[-1] and got.sum() == 1


def test_dsor_too_few_points():
    with pytest.raises(TooFewPointsError):
        dsor(np.random.default_rng(0).normal(size=(5, 3)))


def test_accepts_point_cloud():
    xyz = random_cloud(3).astype(np.float32)
    cloud = PointCloud(np.column_stack([xyz, np.zeros(len(xyz), np.float32)]))
    np.testing.assert_array_equal(dror(cloud), dror(xyz))
    np.testing.assert_array_equal(dsor(cloud), dsor(xyz))


def test_config_validation():
    for bad in (lambda: DrorConfig(min_radius=0), lambda: DrorConfig(min_neighbors=0),
                lambda: DsorConfig(k_neighbors=0), lambda: DsorConfig(range_multiplier=0),
                lambda: MedianConfig(window=4), lambda: MedianConfig(tau_d=0)):
        with pytest.raises(ValueError):
            bad()


# median filter

def _img(data, valid):
    h, w = valid.shape
    return RangeImage(data, valid, np.zeros(0, np.intp), np.zeros(h * w + 1, np.intp), np.zeros(0, np.intp),
                      ProjectionConfig(h=h, w=w))


def brute_median(data, valid, half, tau):
    h, w, _ = data.shape
    out = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            if not valid[y, x]:
                continue
            dark = True
            for ch in range(2):
                win = [data[min(max(y + i, 0), h - 1), (x + j) % w, ch]
                       for i in range(-half, half + 1) for j in range(-half, half + 1)
                       if valid[min(max(y + i, 0), h - 1), (x + j) % w]]
                dark &= data[y, x, ch] < np.median(win) - tau[ch]
            out[y, x] = dark
    return out


def test_median_constant_and_pepper(backend):
    data = np.full((8, 16, 2), 1.3)
    valid = np.ones((8, 16), bool)
    for tau in (1e-9, 0.05, 1.0):
        assert not median_filter(_img(data, valid), MedianConfig(tau_d=tau, tau_i=tau)).any()
    data[3, 7] -= 0.5
    flags = median_filter(_img(data, valid))
    assert flags[3, 7] and flags.sum() == 1
    data[3, 7] += 1.0
    assert not median_filter(_img(data, valid)).any()
    # darker in one channel only is not enough
    data[3, 7] = [0.8, 1.3]
    assert not median_filter(_img(data, valid)).any()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), density=st.floats(0.1, 1.0), window=st.sampled_from([3, 5, 7]))
def test_median_matches_brute_force(seed, density, window):
    rng = np.random.default_rng(seed)
    valid = rng.random((8, 16)) < density
    data = np.where(valid[..., None], rng.random((8, 16, 2)), 0.0)
    cfg = MedianConfig(window=window, tau_d=0.05, tau_i=0.02)
    np.testing.assert_array_equal(median_filter(_img(data, valid), cfg),
                                  brute_median(data, valid, window // 2, (0.05, 0.02)))


def test_median_ignores_filled_voids():
    rng = np.random.default_rng(4)
    pts = rng.normal(scale=15, size=(1500, 3))
    cloud = PointCloud(np.column_stack([pts, rng.random(1500)]).astype(np.float32))
    cfg = ProjectionConfig(h=16, w=64)
    img = compress(project(cloud, cfg))
    np.testing.assert_array_equal(median_filter(img), median_filter(fill_voids(img)))
    mask = median_point_mask(cloud, proj_cfg=cfg)
    assert mask.shape == (1500,)
