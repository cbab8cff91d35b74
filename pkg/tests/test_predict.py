import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lisnownet.cloud_io import PointCloud
from lisnownet.evalbench import synth_scene
from lisnownet.model import NetworkConfig, init_params
from lisnownet.predict import (
    Thresholds,
    classify,
    default_grid,
    denoise,
    select_thresholds,
    snow_mask,
    snow_pixels,
    snow_residual,
    tune_thresholds,
)
from lisnownet.range_image import ProjectionConfig, project

GRID = ProjectionConfig(h=32, w=256)
NET = NetworkConfig(levels=3)


def _cell(rd, ri):
    return np.array([[[rd, ri]]])


def test_classify_examples():
    th = Thresholds(1.0, 1.0, 0.1)
    assert classify(_cell(0.5, 0.5), th)[0, 0]
    assert not classify(_cell(-0.1, 0.9), th)[0, 0]
    assert not classify(_cell(0.5, 0.5), Thresholds(1.0, 1.0, 0.25))[0, 0]
    assert not classify(_cell(0.0, 5.0), Thresholds(1.0, 1.0, 1e-9))[0, 0]


def test_thresholds_positive():
    for args in ((0, 1, 1), (1, -1, 1), (1, 1, 0)):
        with pytest.raises(ValueError):
            Thresholds(*args)


pos = st.floats(1e-6, 10.0)


@settings(max_examples=200, deadline=None)
@given(rd=pos, ri=pos, bump_d=st.floats(0, 5), bump_i=st.floats(0, 5),
       n_d=st.floats(0.1, 3), n_i=st.floats(0.1, 3), db=st.floats(1e-6, 10))
def test_classify_monotone(rd, ri, bump_d, bump_i, n_d, n_i, db):
    th = Thresholds(n_d, n_i, db)
    if classify(_cell(rd, ri), th)[0, 0]:
        assert classify(_cell(rd + bump_d, ri + bump_i), th)[0, 0]


def test_zero_residual_is_not_snow():
    img = np.random.default_rng(0).random((4, 8, 2))
    assert not classify(snow_residual(img, np.zeros_like(img)), Thresholds(0.5, 0.5, 1e-12)).any()


def _trained_like(seed=0, offset=0.0):
    """Random output layer; ``offset`` lifts delta so some residuals turn positive."""
    params = init_params(NET, seed=seed)
    rng = np.random.default_rng(seed)
    for name in ("tail.weight", "tail.bias"):
        params[name].data[...] = rng.normal(scale=0.2, size=params[name].shape)
    params["tail.bias"].data[...] += offset
    return params


@pytest.mark.parametrize("seed", range(4))
def test_identity_denoiser_removes_nothing(seed):
    params = init_params(NET, seed=seed)
    cloud = synth_scene(seed, cfg=GRID, snow_rate=0.2)
    kept, removed, stats = denoise(params, Thresholds(0.5, 0.5, 1e-12), cloud, GRID, NET)
    assert len(removed) == 0 and len(kept) == len(cloud)
    assert stats["snow_pixels"] == 0


def test_denoise_partitions_input():
    cloud = synth_scene(3, cfg=GRID, snow_rate=0.2)
    params = _trained_like(offset=3.0)
    kept, removed, stats = denoise(params, Thresholds(1, 1, 1e-3), cloud, GRID, NET)
    assert stats["kept"] + stats["removed"] == len(cloud) == stats["points"]
    both = np.vstack([kept.points, removed.points])
    order = np.lexsort(both.T[::-1])
    ref = cloud.points[np.lexsort(cloud.points.T[::-1])]
    np.testing.assert_array_equal(both[order], ref)
    assert 0 < len(removed) < len(cloud)
    mask = snow_mask(params, Thresholds(1, 1, 1e-3), cloud, GRID, NET)
    assert mask.sum() == len(removed)


def test_tune_single_candidate():
    frames = [synth_scene(s, cfg=GRID) for s in range(2)]
    grid = {"n_d": [2.0], "n_i": [0.5], "delta_bar": [0.01]}
    best, table = tune_thresholds(_trained_like(), frames, grid, proj_cfg=GRID, net_cfg=NET)
    assert best == Thresholds(2.0, 0.5, 0.01) and len(table) == 1


def test_tune_errors():
    frames = [synth_scene(0, cfg=GRID)]
    with pytest.raises(ValueError):
        tune_thresholds(_trained_like(), frames, {"n_d": [], "n_i": [1], "delta_bar": [1]}, proj_cfg=GRID, net_cfg=NET)
    with pytest.raises(ValueError):
        tune_thresholds(_trained_like(), [], proj_cfg=GRID, net_cfg=NET)
    unlabeled = PointCloud(frames[0].points)
    with pytest.raises(ValueError):
        tune_thresholds(_trained_like(), [unlabeled], proj_cfg=GRID, net_cfg=NET)


def test_dominant_candidate_wins():
    cfg = ProjectionConfig(h=8, w=16)
    xyz = np.array([[5, 0, 0], [0, 5, 0], [-5, 0, 0], [0, -5, 0]], dtype=np.float32)
    cloud = PointCloud(np.column_stack([xyz, np.full(4, 0.5, np.float32)]), np.array([110, 110, 40, 40], np.uint32))
    img = project(cloud, cfg)
    residual = np.zeros((8, 16, 2))
    for p, value in zip(img.pixel_of_point, [0.9, 0.6, 0.5, 0.1]):
        residual.reshape(-1, 2)[p] = value
    # scores are value**2: 0.81, 0.36, 0.25, 0.01
    loose, tight = Thresholds(1, 1, 0.005), Thresholds(1, 1, 0.3)
    best, table = select_thresholds([(img, residual, cloud.labels)], [loose, tight])
    assert best == tight
    counts = dict(table)
    assert (counts[tight].tp, counts[tight].fp, counts[tight].fn) == (2, 0, 0)
    assert (counts[loose].tp, counts[loose].fp) == (2, 2)


def test_tie_prefers_lower_delta_bar():
    cfg = ProjectionConfig(h=8, w=16)
    cloud = PointCloud(np.array([[5, 0, 0, 0.5]], np.float32), np.array([110], np.uint32))
    img = project(cloud, cfg)
    residual = np.zeros((8, 16, 2))
    residual.reshape(-1, 2)[img.pixel_of_point[0]] = 1.0
    best, _ = select_thresholds([(img, residual, cloud.labels)], [Thresholds(1, 1, 0.5), Thresholds(1, 1, 0.1)])
    assert best.delta_bar == 0.1


def test_tune_matches_brute_force():
    params = _trained_like(1, offset=3.0)
    frames = [synth_scene(s, cfg=GRID, snow_rate=0.15) for s in range(3)]
    grid = {"n_d": [0.5, 1.0], "n_i": [1.0, 2.0], "delta_bar": [1e-4, 1e-2, 0.1, 1.0]}
    best, table = tune_thresholds(params, frames, grid, proj_cfg=GRID, net_cfg=NET)
    assert len(table) == 16
    scored = []
    for th, counts in table:
        tp = fp = fn = 0
        for cloud in frames:
            img, _, pixels = snow_pixels(params, th, cloud, GRID, NET)
            pred = np.zeros(len(cloud), bool)
            hit = img.pixel_of_point >= 0
            pred[hit] = pixels.ravel()[img.pixel_of_point[hit]]
            truth = cloud.labels == 110
            tp += int(np.sum(pred & truth))
            fp += int(np.sum(pred & ~truth))
            fn += int(np.sum(~pred & truth))
        assert (counts.tp, counts.fp, counts.fn) == (tp, fp, fn)
        iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
        prec = tp / (tp + fp) if tp + fp else 0.0
        scored.append((iou, prec, -th.delta_bar, th))
    assert best == max(scored, key=lambda r: r[:3])[3]


def test_default_grid_shape():
    g = default_grid()
    assert len(g["delta_bar"]) == 105 and min(g["delta_bar"]) == pytest.approx(1e-12)
