import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lisnownet.cloud_io import (
    DatasetManifest,
    LabelMismatchError,
    MalformedFileError,
    PointCloud,
    Sequence,
    UnsplittableError,
    load_bin,
    load_labels,
    read_manifest,
    save_cloud,
    split_dataset,
    write_manifest,
)


def test_single_record(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(struct.pack("<4f", 1.0, 0.0, 0.0, 0.5))
    cloud = load_bin(p)
    assert len(cloud) == 1
    np.testing.assert_array_equal(cloud.points, [[1.0, 0.0, 0.0, 0.5]])
    assert cloud.frame_id == "a"


def test_empty_file(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert len(load_bin(p)) == 0


def test_bad_size(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\0" * 24)
    with pytest.raises(MalformedFileError):
        load_bin(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_bin(tmp_path / "nope.bin")


def test_clamp_and_drop(tmp_path):
    p = tmp_path / "c.bin"
    raw = np.array([[1, 2, 3, 1.5], [np.nan, 0, 0, 0.2], [1, 1, 1, -0.5], [np.inf, 1, 1, 0.1]], dtype="<f4")
    raw.tofile(p)
    cloud = load_bin(p)
    assert len(cloud) == 2 and cloud.dropped == 2
    np.testing.assert_array_equal(cloud.intensity, [1.0, 0.0])


def test_labels(tmp_path):
    p = tmp_path / "l.label"
    p.write_bytes(struct.pack("<I", 0x6E))
    np.testing.assert_array_equal(load_labels(p, 1), [110])
    p.write_bytes(struct.pack("<I", 0x00010046))
    np.testing.assert_array_equal(load_labels(p, 1), [70])
    p.write_bytes(b"\0" * 8)
    with pytest.raises(LabelMismatchError):
        load_labels(p, 1)


def test_labels_follow_dropped_points(tmp_path):
    raw = np.array([[1, 0, 0, 0.1], [np.nan, 0, 0, 0], [0, 1, 0, 0.2]], dtype="<f4")
    raw.tofile(tmp_path / "f.bin")
    np.array([40, 110, 50], dtype="<u4").tofile(tmp_path / "f.label")
    cloud = load_bin(tmp_path / "f.bin", tmp_path / "f.label")
    np.testing.assert_array_equal(cloud.labels, [40, 50])


def test_save_roundtrip_with_labels(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 4)).astype(np.float32)
    pts[:, 3] = rng.random(50)
    labels = rng.integers(0, 200, 50).astype(np.uint32)
    save_cloud(PointCloud(pts, labels), tmp_path / "x.bin", tmp_path / "x.label")
    back = load_bin(tmp_path / "x.bin", tmp_path / "x.label")
    np.testing.assert_array_equal(back.points, pts)
    np.testing.assert_array_equal(back.labels, labels)


def test_zero_point_cloud_is_zero_bytes(tmp_path):
    save_cloud(PointCloud(np.zeros((0, 4), np.float32)), tmp_path / "z.bin")
    assert (tmp_path / "z.bin").stat().st_size == 0


finite = st.floats(-1e4, 1e4, allow_nan=False, width=32)


@settings(max_examples=40, deadline=None)
@given(xyz=arrays(np.float32, st.tuples(st.integers(0, 30), st.just(3)), elements=finite),
       seed=st.integers(0, 2**16))
def test_roundtrip_property(tmp_path_factory, xyz, seed):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([xyz, rng.random(len(xyz)).astype(np.float32)])
    path = tmp_path_factory.mktemp("rt") / "p.bin"
    save_cloud(PointCloud(pts), path)
    np.testing.assert_array_equal(load_bin(path).points, pts)


def _manifest(n):
    return DatasetManifest([Sequence(f"s{i}", [f"/data/s{i}/{j}.bin" for j in range(3)]) for i in range(n)])


def test_split_80_20():
    train, val = split_dataset(_manifest(10), 0.8, seed=7)
    t = {s.sequence_id for s in train.sequences}
    v = {s.sequence_id for s in val.sequences}
    assert len(t) == 8 and len(v) == 2 and not t & v


def test_split_clamps():
    train, val = split_dataset(_manifest(2), 0.99, seed=0)
    assert len(train.sequences) == 1 and len(val.sequences) == 1
    train, val = split_dataset(_manifest(3), 0.01, seed=0)
    assert len(train.sequences) == 1 and len(val.sequences) == 2


def test_split_deterministic_and_needs_two():
    a = split_dataset(_manifest(6), 0.5, seed=3)
    b = split_dataset(_manifest(6), 0.5, seed=3)
    assert [s.sequence_id for s in a[0].sequences] == [s.sequence_id for s in b[0].sequences]
    with pytest.raises(UnsplittableError):
        split_dataset(_manifest(1))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 15), frac=st.floats(0, 1), seed=st.integers(0, 10**6))
def test_split_partition_property(n, frac, seed):
    train, val = split_dataset(_manifest(n), frac, seed)
    t = [s.sequence_id for s in train.sequences]
    v = [s.sequence_id for s in val.sequences]
    assert sorted(t + v) == sorted(f"s{i}" for i in range(n))
    assert not set(t) & set(v) and t and v


def test_manifest_uniqueness():
    with pytest.raises(ValueError):
        DatasetManifest([Sequence("a", ["x.bin"]), Sequence("a", ["y.bin"])])
    with pytest.raises(ValueError):
        DatasetManifest([Sequence("a", ["x.bin"]), Sequence("b", ["x.bin"])])


def test_manifest_roundtrip(tmp_path):
    (tmp_path / "d").mkdir()
    text = "# comment\nseq0 d/0.bin d/0.label\nseq0 d/1.bin d/1.label  # trailing\n\nseq1 d/2.bin\n"
    (tmp_path / "m.txt").write_text(text)
    m = read_manifest(tmp_path / "m.txt")
    assert [s.sequence_id for s in m.sequences] == ["seq0", "seq1"]
    assert m.sequences[0].frames[1] == tmp_path / "d" / "1.bin"
    assert m.sequences[1].label_paths is None
    write_manifest(m, tmp_path / "m2.txt")
    again = read_manifest(tmp_path / "m2.txt")
    assert [list(map(str, s.frames)) for s in again.sequences] == [
        [str(p.resolve()) for p in s.frames] for s in m.sequences
    ]


def test_manifest_partial_labels(tmp_path):
    (tmp_path / "m.txt").write_text("a x.bin x.label\na y.bin\n")
    with pytest.raises(MalformedFileError):
        read_manifest(tmp_path / "m.txt")
