"""Spherical projection of point clouds into two-channel panoramic range images.

Rows are uniform inclination bins over the configured field of view, columns
are uniform azimuth bins over the full circle. Every projected point is kept
in a per-pixel list (nearest first) so pixel decisions can be pushed back to
all points, not only to the one that defines the pixel value.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from lisnownet import kernels
from lisnownet._pykernels import pad_index
from lisnownet.cloud_io import PointCloud


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionConfig:
    h: int = 64
    w: int = 2048
    fov_min: float = math.radians(-25.0)
    fov_max: float = math.radians(3.0)
    dog_sigmas: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        if self.h < 2 or self.w < 4:
            raise ValueError(f"range image must be at least 2x4, got {self.h}x{self.w}")
        if not self.fov_min < self.fov_max:
            raise ValueError("fov_min must be below fov_max")

    @property
    def row_step(self):
        return (self.fov_max - self.fov_min) / self.h

    @property
    def col_step(self):
        return 2 * math.pi / self.w

    def row_center(self, row):
        return self.fov_max - (np.asarray(row) + 0.5) * self.row_step

    def col_center(self, col):
        return -math.pi + (np.asarray(col) + 0.5) * self.col_step


@dataclass
class RangeImage:
    """Channel-last ``(h, w, 2)`` grid of distance and intensity.

    ``order`` lists projected point indices grouped by pixel (row-major) and
    sorted nearest-first within a pixel; ``offsets[p]:offsets[p + 1]`` is the
    slice belonging to flat pixel ``p``. ``pixel_of_point`` maps each input
    point to its flat pixel, or -1 when the point was dropped.
    """

    data: np.ndarray
    valid: np.ndarray
    order: np.ndarray
    offsets: np.ndarray
    pixel_of_point: np.ndarray
    cfg: ProjectionConfig
    dropped: int = 0
    compressed: bool = False

    @property
    def h(self):
        return self.data.shape[0]

    @property
    def w(self):
        return self.data.shape[1]

    @property
    def fov(self):
        return self.cfg.fov_min, self.cfg.fov_max

    def pixel_points(self, row, col):
        p = row * self.w + col
        return self.order[self.offsets[p]:self.offsets[p + 1]]

    def with_data(self, data, **changes):
        return replace(self, data=data, **changes)


def spherical(xyz):
    """Distance, inclination and azimuth of each point; atan2(0, 0) is 0."""
    xyz = np.asarray(xyz, dtype=np.float64)
    d = np.linalg.norm(xyz, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.arcsin(np.clip(xyz[:, 2] / d, -1.0, 1.0))
    psi = np.arctan2(xyz[:, 1], xyz[:, 0])
    return d, phi, psi


def project(cloud: PointCloud, cfg: ProjectionConfig = ProjectionConfig()) -> RangeImage:
    n = len(cloud)
    if n == 0:
        raise EmptyInputError("cannot project an empty cloud")
    d, phi, psi = spherical(cloud.xyz)
    keep = (d > 0) & (phi >= cfg.fov_min) & (phi <= cfg.fov_max)
    rows = np.floor((cfg.fov_max - phi[keep]) / (cfg.fov_max - cfg.fov_min) * cfg.h).astype(np.intp)
    np.clip(rows, 0, cfg.h - 1, out=rows)
    cols = np.floor((psi[keep] + math.pi) / (2 * math.pi) * cfg.w).astype(np.intp) % cfg.w
    flat = rows * cfg.w + cols

    idx = np.flatnonzero(keep)
    npix = cfg.h * cfg.w
    srt, offsets = kernels.bucket_order(flat, d[idx], npix)
    order = idx[srt]

    valid = offsets[1:] > offsets[:-1]
    first = order[offsets[:-1][valid]]
    data = np.zeros((npix, 2), dtype=np.float64)
    data[valid, 0] = d[first]
    data[valid, 1] = cloud.intensity[first]

    pixel_of_point = np.full(n, -1, dtype=np.intp)
    pixel_of_point[idx] = flat
    return RangeImage(
        data=data.reshape(cfg.h, cfg.w, 2),
        valid=valid.reshape(cfg.h, cfg.w),
        order=order,
        offsets=offsets,
        pixel_of_point=pixel_of_point,
        cfg=cfg,
        dropped=int(n - keep.sum()),
    )


def unproject(img: RangeImage, distances=None):
    """Cartesian points at pixel centres for every valid pixel, shape (n_valid, 3)."""
    rows, cols = np.nonzero(img.valid)
    d = img.data[rows, cols, 0] if distances is None else distances
    phi = img.cfg.row_center(rows)
    psi = img.cfg.col_center(cols)
    return np.stack([d * np.cos(phi) * np.cos(psi), d * np.cos(phi) * np.sin(psi), d * np.sin(phi)], axis=1)


def compress(img: RangeImage) -> RangeImage:
    """Elementwise cube root of both channels."""
    return img.with_data(np.cbrt(img.data), compressed=True)


def _panoramic(x, ph, pw):
    """Pad a 2D grid: wrap columns, replicate rows."""
    h, w = x.shape
    return x[pad_index(h, ph, False)][:, pad_index(w, pw, True)]


def _correlate(x, kernel):
    kh, kw = kernel.shape
    h, w = x.shape
    xp = _panoramic(x, kh // 2, kw // 2)
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * xp[i:i + h, j:j + w]
    return out


def gaussian_kernel(sigma, size=3):
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def dog_kernel(sigmas=(0.5, 1.0)):
    return gaussian_kernel(sigmas[0]) - gaussian_kernel(sigmas[1])


def _row_stats(x, valid):
    """Per-row mean + std over valid pixels, with the global value for empty rows."""
    if valid.any():
        fallback = x[valid].mean() + x[valid].std()
    else:
        fallback = 0.0
    counts = valid.sum(axis=1)
    fill = np.full(x.shape[0], fallback)
    for r in np.flatnonzero(counts):
        v = x[r, valid[r]]
        fill[r] = v.mean() + v.std()
    return fill


def fill_voids(img: RangeImage) -> RangeImage:
    """Fill void pixels in four steps; measured pixels are returned untouched.

    Per channel, on a working copy: (1) 3x3 max-dilation into voids that touch
    a measured pixel, (2) per-row mean + std into the rest, (3) subtract a 3x3
    difference of Gaussians, (4) 7x7 box average. Only void positions take the
    result.
    """
    valid = img.valid
    void = ~valid
    h, w = valid.shape
    near = _panoramic(valid, 1, 1)
    touches = np.zeros_like(valid)
    for i in range(3):
        for j in range(3):
            touches |= near[i:i + h, j:j + w]
    dilate_into = void & touches
    rest = void & ~touches
    dog = dog_kernel(img.cfg.dog_sigmas)
    box = np.full((7, 7), 1.0 / 49.0)

    out = img.data.copy()
    for ch in range(img.data.shape[2]):
        src = img.data[..., ch]
        work = np.where(valid, src, -np.inf)
        wp = _panoramic(work, 1, 1)
        dil = np.full_like(src, -np.inf)
        for i in range(3):
            for j in range(3):
                np.maximum(dil, wp[i:i + h, j:j + w], out=dil)
        work = np.where(valid, src, 0.0)
        work[dilate_into] = dil[dilate_into]
        fill = _row_stats(src, valid)
        work[rest] = np.broadcast_to(fill[:, None], (h, w))[rest]
        work = work - _correlate(work, dog)
        work = _correlate(work, box)
        out[..., ch] = np.where(valid, src, work)
    return img.with_data(out)


def preprocess(cloud: PointCloud, cfg: ProjectionConfig = ProjectionConfig()) -> RangeImage:
    return fill_voids(compress(project(cloud, cfg)))


def point_mask(img: RangeImage, pixel_mask) -> np.ndarray:
    """Per-point booleans inherited from their pixel; dropped points are False."""
    pixel_mask = np.asarray(pixel_mask, dtype=bool)
    if pixel_mask.shape != img.valid.shape:
        raise ValueError(f"mask shape {pixel_mask.shape} does not match image {img.valid.shape}")
    flat = np.append(pixel_mask.ravel(), False)
    return flat[img.pixel_of_point]


def apply_mask(cloud: PointCloud, img: RangeImage, pixel_mask):
    """Split ``cloud`` into (kept, removed) by the mask of each point's pixel."""
    removed = point_mask(img, pixel_mask)
    return cloud.subset(~removed), cloud.subset(removed)


def save_range_image(img: RangeImage, path) -> None:
    """Flat binary: uint32 h, w (little endian) then each channel as float32 row-major."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", img.h, img.w))
        fh.write(np.ascontiguousarray(np.moveaxis(img.data, -1, 0), dtype="<f4").tobytes())


def load_range_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    h, w = struct.unpack("<II", raw[:8])
    planes = np.frombuffer(raw, dtype="<f4", offset=8)
    if planes.size != 2 * h * w:
        raise ValueError(f"{path}: expected {2 * h * w} floats, found {planes.size}")
    return np.moveaxis(planes.reshape(2, h, w), 0, -1).astype(np.float64)


def dump_image(img: RangeImage, path, channel=0, gamma=0.5) -> None:
    """Debug dump of one channel as 8-bit grayscale (PGM by suffix, else PNG via Pillow)."""
    x = img.data[..., channel]
    top = x.max()
    g = (x / top) ** gamma if top > 0 else np.zeros_like(x)
    pixels = np.round(255 * np.clip(g, 0, 1)).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.w} {img.h}\n255\n".encode())
            fh.write(pixels.tobytes())
        return
    from PIL import Image

    Image.fromarray(pixels, mode="L").save(path)
