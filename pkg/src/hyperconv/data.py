"""Image datasets stored as TNSR files, plus two synthetic generators."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tnsr
from .config import format_text, parse_text

IMAGES_FILE = "images.tnsr"
LABELS_FILE = "labels.tnsr"
META_FILE = "meta.txt"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if labels.ndim != 1 or len(labels) != len(self.images):
            raise DatasetError(f"{len(self.images)} images but labels have shape {labels.shape}")
        if len(labels) and (np.any(labels != np.round(labels)) or labels.min() < 0 or labels.max() >= self.class_count):
            raise DatasetError(f"labels must be integers in [0, {self.class_count})")
        if not np.all(np.isfinite(self.images)):
            raise DatasetError("images contain non-finite values")
        self.labels = labels.astype(np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def split(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(len(self) * (1 - fraction)))
        return self.subset(order[:cut]), self.subset(order[cut:])


def save_dataset(path: Union[str, Path], ds: Dataset) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tnsr.save(root / IMAGES_FILE, ds.images)
    tnsr.save(root / LABELS_FILE, ds.labels.astype(np.float64))
    (root / META_FILE).write_text(format_text({"classes": ds.class_count}))


def load_dataset(path: Union[str, Path], class_count: Optional[int] = None) -> Dataset:
    """Read ``images.tnsr`` and ``labels.tnsr`` from a directory.

    The class count comes from ``meta.txt`` when present, otherwise from the
    largest label.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    try:
        images = tnsr.load(root / IMAGES_FILE)
        labels = tnsr.load(root / LABELS_FILE)
    except FileNotFoundError as exc:
        raise DatasetError(f"missing dataset file {Path(exc.filename).name}") from None
    except tnsr.TnsrFormatError as exc:
        raise DatasetError(f"malformed dataset file: {exc}") from None
    if class_count is None and (root / META_FILE).exists():
        class_count = int(parse_text((root / META_FILE).read_text()).get("classes", 0)) or None
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images, labels, class_count)


# -- synthetic sets -------------------------------------------------------------------


def separable_two_class(
    n: int = 256, image_size: int = 16, channels: int = 3, margin: float = 0.5, noise: float = 1.0, seed: int = 0
) -> Dataset:
    """Two classes split by a hyperplane in pixel space.

    The normal direction raises channel 0 and lowers channel 1 uniformly;
    every sample sits at least ``margin`` from the plane.
    """
    if channels < 2:
        raise ValueError("need at least two channels")
    rng = np.random.default_rng(seed)
    shape = (channels, image_size, image_size)
    p = np.zeros(shape)
    p[0], p[1] = 1.0, -1.0
    p /= np.linalg.norm(p)
    labels = rng.integers(0, 2, n)
    z = rng.normal(0.0, noise, (n,) + shape)
    along = np.einsum("nchw,chw->n", z, p)
    z -= along[:, None, None, None] * p
    offset = (margin + np.abs(rng.normal(0.0, 1.0, n))) * np.where(labels == 1, 1.0, -1.0)
    images = z + offset[:, None, None, None] * p * np.sqrt(p.size) / 4
    return Dataset(images, labels, 2)


def texture_four_class(
    n: int = 256, image_size: int = 16, channels: int = 3, noise: float = 0.3, seed: int = 0
) -> Dataset:
    """Horizontal stripes, vertical stripes, diagonal stripes and checkerboards.

    Period, phase and contrast are drawn per image; the same pattern is
    shared by all channels with per-channel gain.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    labels = rng.integers(0, 4, n)
    images = np.empty((n, channels, image_size, image_size))
    for i, c in enumerate(labels):
        period = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi / period
        if c == 0:
            pat = np.sin(k * yy + phase)
        elif c == 1:
            pat = np.sin(k * xx + phase)
        elif c == 2:
            pat = np.sin(k * (xx + yy) / np.sqrt(2) + phase)
        else:
            pat = np.sin(k * xx + phase) * np.sin(k * yy + rng.uniform(0, 2 * np.pi))
        gain = rng.uniform(0.7, 1.3, channels)
        images[i] = gain[:, None, None] * pat + rng.normal(0.0, noise, (channels, image_size, image_size))
    return Dataset(images, labels, 4)
