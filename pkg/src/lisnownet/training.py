"""Unsupervised training: shuffled mini-batches, Adam, per-epoch decay."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lisnownet.autodiff import ParamStore, RngState, adam_step
from lisnownet.cloud_io import DatasetManifest, PointCloud, load_bin
from lisnownet.model import LossWeights, NetworkConfig, compute_loss, forward, init_params, to_batch
from lisnownet.range_image import ProjectionConfig, preprocess

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.89
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")

    def lr_at(self, epoch):
        """Learning rate in effect during ``epoch`` (0-based), i.e. after ``epoch`` decays."""
        return self.lr * self.lr_decay ** epoch


def _frames(data):
    if isinstance(data, DatasetManifest):
        return [(str(path), load_bin(path)) for _, path, _ in data.frames()]
    return [(c.frame_id or str(i), c) for i, c in enumerate(data)]


def prepare(data, proj_cfg: ProjectionConfig):
    """Preprocess every frame once; returns frame names and an (n, 2, h, w) array."""
    frames = _frames(data)
    if not frames:
        raise ValueError("training set is empty")
    names = [name for name, _ in frames]
    batch = to_batch([preprocess(cloud, proj_cfg).data for _, cloud in frames])
    return names, batch


def train(
    data,
    net_cfg: NetworkConfig = NetworkConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    weights: LossWeights = LossWeights(),
    proj_cfg: ProjectionConfig = ProjectionConfig(),
    checkpoint_dir=None,
    params: ParamStore | None = None,
):
    """Fit the network on ``data`` (a manifest or a list of clouds).

    Returns the parameters and one log row per epoch with the learning rate
    used and the mean total loss and parts over that epoch's batches.
    Identical inputs and seed give bit-identical parameters.
    """
    names, images = prepare(data, proj_cfg)
    net_cfg.check_input(*images.shape[2:])
    params = params or init_params(net_cfg, seed=train_cfg.seed)
    shuffle = np.random.default_rng(train_cfg.seed)
    dropout_rng = RngState(train_cfg.seed + 1)
    history = []
    n = len(images)
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        order = shuffle.permutation(n)
        sums = {"total": 0.0, "fft": 0.0, "dwt": 0.0, "residual": 0.0}
        n_batches = 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            x = images[idx]
            delta = forward(params, x, net_cfg, dropout_rng, training=True)
            total, parts = compute_loss(x, delta, weights)
            value = total.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss {value} at epoch {epoch}, batch {n_batches} (frames {[names[i] for i in idx]})"
                )
            total.backward()
            adam_step(params, lr)
            sums["total"] += value
            for k, v in parts.items():
                sums[k] += v
            n_batches += 1
        row = {"epoch": epoch, "lr": lr, **{k: v / n_batches for k, v in sums.items()}}
        history.append(row)
        logger.info("epoch %d lr %.6g loss %.6g", epoch, lr, row["total"])
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            params.save(Path(checkpoint_dir) / f"epoch_{epoch:03d}.lsnp")
    return params, history


def load_clouds(manifest: DatasetManifest, with_labels=True) -> list[PointCloud]:
    return [load_bin(path, lab if with_labels else None) for _, path, lab in manifest.frames()]
