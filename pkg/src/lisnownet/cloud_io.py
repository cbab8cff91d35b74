"""Point cloud, label, and manifest I/O.

Clouds use the KITTI layout: little-endian float32 records of
``x, y, z, intensity``. Labels use the SemanticKITTI layout: one little-endian
uint32 per point whose lower 16 bits are the class id.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

RECORD_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
DEFAULT_SNOW_IDS = frozenset({110, 111})


class MalformedFileError(ValueError):
    pass


class LabelMismatchError(ValueError):
    pass


class UnsplittableError(ValueError):
    pass


@dataclass
class PointCloud:
    """``points`` is an (N, 4) float32 array of x, y, z (meters) and intensity."""

    points: np.ndarray
    labels: np.ndarray | None = None
    frame_id: str = ""
    dropped: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint32)
            if len(self.labels) != len(self.points):
                raise LabelMismatchError(
                    f"{self.frame_id or 'cloud'}: {len(self.labels)} labels for {len(self.points)} points"
                )

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def intensity(self):
        return self.points[:, 3]

    def subset(self, mask_or_index) -> PointCloud:
        labels = None if self.labels is None else self.labels[mask_or_index]
        return PointCloud(self.points[mask_or_index], labels, self.frame_id)


def sanitize(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp intensity to [0, 1] and drop rows with any non-finite value.

    Returns the cleaned points and the boolean keep-mask over the input rows.
    """
    points = np.asarray(points, dtype=np.float32).reshape(-1, 4)
    keep = np.isfinite(points).all(axis=1)
    out = points[keep].copy()
    np.clip(out[:, 3], 0.0, 1.0, out=out[:, 3])
    return out, keep


def load_bin(path, labels_path=None) -> PointCloud:
    path = Path(path)
    size = path.stat().st_size  # raises FileNotFoundError
    if size % (4 * RECORD_DTYPE.itemsize):
        raise MalformedFileError(f"{path}: size {size} is not a multiple of 16 bytes")
    raw = np.fromfile(path, dtype=RECORD_DTYPE).reshape(-1, 4)
    points, keep = sanitize(raw)
    dropped = int((~keep).sum())
    if dropped:
        logger.debug("%s: dropped %d non-finite points", path, dropped)
    labels = None
    if labels_path is not None:
        labels = load_labels(labels_path, len(raw))[keep]
    return PointCloud(points, labels, frame_id=path.stem, dropped=dropped)


def load_labels(path, n_points: int) -> np.ndarray:
    path = Path(path)
    size = path.stat().st_size
    if size != n_points * LABEL_DTYPE.itemsize:
        raise LabelMismatchError(f"{path}: {size} bytes of labels for {n_points} points")
    return np.fromfile(path, dtype=LABEL_DTYPE) & 0xFFFF


def save_cloud(cloud: PointCloud, path, labels_path=None) -> None:
    """Write ``cloud`` as a .bin file, plus a .label sidecar when asked and labels exist."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(cloud.points, dtype=RECORD_DTYPE).tofile(path)
    if labels_path is not None and cloud.labels is not None:
        np.ascontiguousarray(cloud.labels, dtype=LABEL_DTYPE).tofile(labels_path)


@dataclass
class Sequence:
    sequence_id: str
    frames: list[Path]
    label_paths: list[Path] | None = None

    def has_labels(self) -> bool:
        return self.label_paths is not None


@dataclass
class DatasetManifest:
    sequences: list[Sequence] = field(default_factory=list)
    split_seed: int = 0

    def __post_init__(self):
        ids = [s.sequence_id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sequence ids in manifest")
        frames = [f for s in self.sequences for f in s.frames]
        if len(set(frames)) != len(frames):
            raise ValueError("duplicate frame paths in manifest")

    def __len__(self):
        return sum(len(s.frames) for s in self.sequences)

    def frames(self):
        """Yield ``(sequence_id, bin_path, label_path_or_None)`` in manifest order."""
        for seq in self.sequences:
            labels = seq.label_paths or [None] * len(seq.frames)
            for f, lab in zip(seq.frames, labels):
                yield seq.sequence_id, f, lab


def read_manifest(path) -> DatasetManifest:
    """Parse ``<sequence_id> <bin_path> [<label_path>]`` lines.

    Relative paths resolve against the manifest's directory; blank lines and
    ``#`` comments are skipped. A sequence either labels all of its frames or none.
    """
    path = Path(path)
    base = path.parent
    order: list[str] = []
    frames: dict[str, list[Path]] = {}
    labels: dict[str, list[Path | None]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise MalformedFileError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(parts)}")
        seq = parts[0]
        if seq not in frames:
            order.append(seq)
            frames[seq], labels[seq] = [], []
        frames[seq].append(base / parts[1])
        labels[seq].append(base / parts[2] if len(parts) == 3 else None)
    sequences = []
    for seq in order:
        labs = labels[seq]
        if all(lab is None for lab in labs):
            labs = None
        elif any(lab is None for lab in labs):
            raise MalformedFileError(f"{path}: sequence {seq} labels only some of its frames")
        sequences.append(Sequence(seq, frames[seq], labs))
    return DatasetManifest(sequences)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for seq_id, f, lab in manifest.frames():
        fields = [seq_id, os.path.relpath(Path(f).resolve(), base)]
        if lab is not None:
            fields.append(os.path.relpath(Path(lab).resolve(), base))
        lines.append(" ".join(fields))
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def split_dataset(manifest: DatasetManifest, train_fraction: float = 0.8, seed: int = 0):
    """Partition whole sequences into train and validation manifests.

    The train side gets ``round(train_fraction * n)`` sequences, clamped so both
    sides keep at least one. Sequences keep their manifest order on each side.
    """
    n = len(manifest.sequences)
    if n < 2:
        raise UnsplittableError(f"need at least 2 sequences to split, got {n}")
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    chosen = set(perm[:n_train].tolist())
    train = [s for i, s in enumerate(manifest.sequences) if i in chosen]
    val = [s for i, s in enumerate(manifest.sequences) if i not in chosen]
    return DatasetManifest(train, seed), DatasetManifest(val, seed)
