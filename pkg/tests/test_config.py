import math

import pytest

from lisnownet.config import ConfigError, RunConfig, dump_config, load_config, parse_lines, write_thresholds
from lisnownet.predict import Thresholds


def test_defaults_cover_every_section():
    keys = RunConfig().keys()
    for prefix in ("proj.", "net.", "train.", "loss.", "thresholds.", "dror.", "dsor.", "median."):
        assert any(k.startswith(prefix) for k in keys)
    assert "snow_ids" in keys and len(keys) == len(set(keys))


def test_dump_load_roundtrip(tmp_path):
    cfg = RunConfig().with_overrides({
        "proj.h": "32", "proj.fov_min": str(math.radians(-20)), "net.levels": "3", "train.lr": "0.0005",
        "loss.fft_norm": "backward", "thresholds.delta_bar": "1e-5", "snow_ids": "110,7",
        "dror.min_neighbors": "4",
    })
    dump_config(cfg, tmp_path / "run.cfg")
    assert load_config(tmp_path / "run.cfg") == cfg
    assert cfg.proj.h == 32 and cfg.net.levels == 3 and cfg.snow_ids == frozenset({7, 110})
    assert cfg.loss.fft_norm == "backward"


def test_later_layers_win(tmp_path):
    (tmp_path / "a.cfg").write_text("train.epochs=5\ntrain.seed=1  # comment\n\n")
    cfg = load_config(tmp_path / "a.cfg")
    assert cfg.train.epochs == 5 and cfg.train.seed == 1
    cfg = cfg.with_overrides({"train.seed": "9"})
    assert cfg.train.epochs == 5 and cfg.train.seed == 9
    assert parse_lines("a=1\na=2\n") == {"a": "2"}


@pytest.mark.parametrize("text", ["nonsense\n", "=3\n"])
def test_bad_lines(text):
    with pytest.raises(ConfigError):
        parse_lines(text)


@pytest.mark.parametrize("key,value", [
    ("net.levles", "3"), ("bogus.x", "1"), ("net", "3"), ("net.levels", "three"),
    ("net.levels", "1"), ("loss.alpha", "2.0"), ("thresholds.n_d", "0"),
])
def test_bad_overrides(key, value):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({key: value})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_thresholds_file(tmp_path):
    th = Thresholds(0.5, 2.0, 1.2345678901234e-7)
    write_thresholds(th, tmp_path / "t.cfg")
    assert load_config(tmp_path / "t.cfg").thresholds == th
