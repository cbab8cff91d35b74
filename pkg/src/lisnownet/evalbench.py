"""Metrics, timing, synthetic scenes and pose-based map accumulation."""
from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from lisnownet.cloud_io import DEFAULT_SNOW_IDS, PointCloud
from lisnownet.range_image import ProjectionConfig

# fixed CSV headers. Timing columns of a metrics row stay empty unless latency
# was measured, so accuracy-only runs are byte-reproducible.
METRICS_FIELDS = ["method", "frames", "tp", "fp", "fn", "precision", "recall", "iou", "mean_ms", "p50_ms", "p95_ms"]
BENCH_FIELDS = ["method", "frames", "points", "reps", "mean_ms", "p50_ms", "p95_ms", "points_per_s"]

GROUND_ID = 40
STRUCTURE_ID = 50
SNOW_ID = 110


def _ratio(num, den):
    # no positives anywhere counts as a perfect score
    return 1.0 if den == 0 else num / den


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def iou(self):
        return _ratio(self.tp, self.tp + self.fp + self.fn)


def evaluate(pred_mask, labels, snow_ids=DEFAULT_SNOW_IDS) -> ConfusionCounts:
    """Confusion counts with "predicted snow" as the positive class."""
    pred = np.asarray(pred_mask, dtype=bool)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError(f"{pred.shape[0] if pred.ndim else 0} predictions for {labels.shape[0]} labels")
    truth = np.isin(labels, list(snow_ids))
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    per_frame: list[ConfusionCounts] = field(default_factory=list)
    latency_ms: list[float] = field(default_factory=list)

    @classmethod
    def from_frames(cls, per_frame, latency_ms=()):
        total = ConfusionCounts()
        for c in per_frame:
            total = total + c
        return cls(total, list(per_frame), list(latency_ms))

    @property
    def precision(self):
        return self.counts.precision

    @property
    def recall(self):
        return self.counts.recall

    @property
    def iou(self):
        return self.counts.iou

    def frame_means(self):
        """Per-frame averaged precision / recall / IoU (the micro values are the headline)."""
        if not self.per_frame:
            return {"precision": 1.0, "recall": 1.0, "iou": 1.0}
        return {
            k: float(np.mean([getattr(c, k) for c in self.per_frame])) for k in ("precision", "recall", "iou")
        }

    def runtime(self):
        return latency_stats(self.latency_ms)

    def row(self, method):
        c = self.counts
        row = {
            "method": method,
            "frames": len(self.per_frame),
            "tp": c.tp,
            "fp": c.fp,
            "fn": c.fn,
            "precision": f"{self.precision:.6f}",
            "recall": f"{self.recall:.6f}",
            "iou": f"{self.iou:.6f}",
            "mean_ms": "",
            "p50_ms": "",
            "p95_ms": "",
        }
        if self.latency_ms:
            row.update({k: f"{v:.3f}" for k, v in self.runtime().items()})
        return row


def latency_stats(samples_ms):
    if len(samples_ms) == 0:
        return {"mean_ms": 0.0, "p50_ms": 0.0, "p95_ms": 0.0}
    s = np.asarray(samples_ms, dtype=float)
    return {"mean_ms": float(s.mean()), "p50_ms": float(np.percentile(s, 50)), "p95_ms": float(np.percentile(s, 95))}


def bench_row(method, frames, stats, reps):
    return {
        "method": method,
        "frames": len(frames),
        "points": sum(len(f) for f in frames),
        "reps": reps,
        "mean_ms": f"{stats['mean_ms']:.3f}",
        "p50_ms": f"{stats['p50_ms']:.3f}",
        "p95_ms": f"{stats['p95_ms']:.3f}",
        "points_per_s": f"{stats['points_per_s']:.1f}",
    }


def write_csv(rows, path, fields):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def cloud_digest(cloud: PointCloud) -> str:
    h = hashlib.sha256(np.ascontiguousarray(cloud.points).tobytes())
    if cloud.labels is not None:
        h.update(np.ascontiguousarray(cloud.labels).tobytes())
    return h.hexdigest()


def benchmark(method: Callable[[PointCloud], object], frames: Sequence[PointCloud], warmup=1, reps=3):
    """Wall-clock latency of ``method`` per frame.

    ``warmup`` untimed passes over all frames precede ``reps`` timed passes.
    Returns mean/p50/p95 in milliseconds, throughput in points per second,
    the raw samples, and the last output per frame.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("benchmark needs at least one frame")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for _ in range(warmup):
        for f in frames:
            method(f)
    samples = []
    outputs = [None] * len(frames)
    for _ in range(reps):
        for i, f in enumerate(frames):
            t0 = time.perf_counter()
            outputs[i] = method(f)
            samples.append((time.perf_counter() - t0) * 1e3)
    stats = latency_stats(samples)
    total_points = reps * sum(len(f) for f in frames)
    stats["points_per_s"] = total_points / (sum(samples) / 1e3) if sum(samples) > 0 else math.inf
    stats["samples_ms"] = samples
    stats["outputs"] = outputs
    return stats


def _ray_box(origin_dirs, box):
    """Entry distance of unit rays from the origin into an axis-aligned box (inf on miss)."""
    lo, hi = box
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / origin_dirs
        t1 = lo * inv
        t2 = hi * inv
    t_near = np.nanmax(np.minimum(t1, t2), axis=-1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (t_far >= t_near) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def synth_scene(
    seed,
    n_beams=64,
    n_cols=2048,
    snow_rate=0.1,
    cfg: ProjectionConfig | None = None,
    sensor_height=1.73,
    max_range=80.0,
) -> PointCloud:
    """Deterministic labelled frame: ground plane, 2-4 boxes, and snowflakes.

    Rays follow the range image grid (one ray per pixel, jittered inside it).
    Surfaces have intensity in [0.3, 0.8]. ``round(snow_rate * n_surface)``
    rays, drawn uniformly over the grid, return a snowflake instead: range
    within 25 m and in front of whatever the ray would have hit, intensity at
    most 0.05.
    """
    if not 0 <= snow_rate <= 0.5:
        raise ValueError("snow_rate must be in [0, 0.5]")
    cfg = cfg or ProjectionConfig(h=n_beams, w=n_cols)
    rng = np.random.default_rng(seed)
    h, w = cfg.h, cfg.w
    phi = cfg.row_center(np.arange(h))[:, None] + rng.uniform(-0.25, 0.25, (h, w)) * cfg.row_step
    psi = cfg.col_center(np.arange(w))[None, :] + rng.uniform(-0.25, 0.25, (h, w)) * cfg.col_step
    dirs = np.stack([np.cos(phi) * np.cos(psi), np.cos(phi) * np.sin(psi), np.sin(phi)], axis=-1)

    with np.errstate(divide="ignore"):
        ground = np.where(dirs[..., 2] < 0, -sensor_height / dirs[..., 2], np.inf)
    rng_range = ground
    label = np.full((h, w), GROUND_ID, dtype=np.uint32)
    intensity = np.full((h, w), rng.uniform(0.3, 0.5))

    for _ in range(int(rng.integers(2, 5))):
        dist = rng.uniform(10.0, 40.0)
        bearing = rng.uniform(-math.pi, math.pi)
        size = rng.uniform(2.0, 12.0, 2)
        cx, cy = dist * math.cos(bearing), dist * math.sin(bearing)
        lo = np.array([cx - size[0] / 2, cy - size[1] / 2, -sensor_height])
        hi = np.array([cx + size[0] / 2, cy + size[1] / 2, -sensor_height + rng.uniform(2.0, 6.0)])
        t = _ray_box(dirs, (lo, hi))
        closer = t < rng_range
        rng_range = np.where(closer, t, rng_range)
        label[closer] = STRUCTURE_ID
        intensity[closer] = rng.uniform(0.4, 0.8)

    hit = rng_range <= max_range
    rng_range = np.where(hit, rng_range + rng.normal(0.0, 0.01, (h, w)), np.inf)
    intensity = np.clip(intensity + rng.normal(0.0, 0.02, (h, w)), 0.3, 0.8)

    n_surface = int(hit.sum())
    n_snow = min(int(round(snow_rate * n_surface)), h * w)
    snow = np.zeros(h * w, dtype=bool)
    snow[rng.choice(h * w, size=n_snow, replace=False)] = True
    snow = snow.reshape(h, w)
    limit = np.minimum(25.0, 0.8 * rng_range)
    flake = 1.0 + (limit - 1.0) * rng.random((h, w))
    rng_range = np.where(snow, flake, rng_range)
    intensity = np.where(snow, rng.uniform(0.0, 0.05, (h, w)), intensity)
    label[snow] = SNOW_ID

    keep = (hit | snow).ravel()
    xyz = (dirs * rng_range[..., None]).reshape(-1, 3)[keep]
    points = np.column_stack([xyz, intensity.ravel()[keep]]).astype(np.float32)
    return PointCloud(points, label.ravel()[keep], frame_id=f"synth_{seed}")


@dataclass(frozen=True)
class Pose:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape == (3, 4):
            m = np.vstack([m, [0.0, 0.0, 0.0, 1.0]])
        if m.shape != (4, 4):
            raise ValueError(f"pose must be 3x4 or 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("pose bottom row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6, rtol=0):
            raise ValueError("pose rotation is not orthonormal")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(4))

    @classmethod
    def translation(cls, x=0.0, y=0.0, z=0.0):
        m = np.eye(4)
        m[:3, 3] = (x, y, z)
        return cls(m)

    def apply(self, xyz):
        return xyz @ self.matrix[:3, :3].T + self.matrix[:3, 3]


def read_poses(path) -> list[Pose]:
    """KITTI odometry poses: twelve floats (row-major 3x4) per line."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        values = [float(v) for v in line.split()]
        if len(values) != 12:
            raise ValueError(f"{path}:{lineno}: expected 12 values, got {len(values)}")
        poses.append(Pose(np.array(values).reshape(3, 4)))
    return poses


def write_poses(poses, path):
    lines = [" ".join(f"{v:.9g}" for v in p.matrix[:3].ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def voxel_downsample(xyz, voxel):
    """Indices of one point per occupied voxel, the one nearest the voxel centre."""
    keys = np.floor(xyz / voxel).astype(np.int64)
    centre_dist = np.linalg.norm(xyz - (keys + 0.5) * voxel, axis=1)
    order = np.lexsort((np.arange(len(xyz)), centre_dist, keys[:, 2], keys[:, 1], keys[:, 0]))
    k = keys[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(k[1:] != k[:-1], axis=1)
    return order[first]


def accumulate_map(clouds: Sequence[PointCloud], poses: Sequence[Pose], voxel=None) -> PointCloud:
    if len(clouds) != len(poses):
        raise ValueError(f"{len(clouds)} clouds but {len(poses)} poses")
    parts = []
    for cloud, pose in zip(clouds, poses):
        if not isinstance(pose, Pose):
            pose = Pose(pose)
        pts = cloud.points.astype(np.float64)
        pts[:, :3] = pose.apply(pts[:, :3])
        parts.append(pts)
    merged = np.concatenate(parts) if parts else np.zeros((0, 4))
    if voxel is not None and len(merged):
        if voxel <= 0:
            raise ValueError("voxel size must be positive")
        merged = merged[voxel_downsample(merged[:, :3], voxel)]
    return PointCloud(merged.astype(np.float32), frame_id="map")
