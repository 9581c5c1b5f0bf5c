"""Desk-scale datasets: seeded Gaussian blobs and IDX-format image files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file."""


class IdxMagicError(IdxFormatError):
    """Wrong magic number for the requested reader."""


class IdxTruncatedError(IdxFormatError):
    """File ends before the declared payload."""


class IdxCountMismatchError(IdxFormatError):
    """Image and label files declare different sample counts."""


@dataclass
class Dataset:
    """Immutable sample container with a deterministic iteration order."""

    inputs: np.ndarray  # [N, ...] float
    labels: np.ndarray  # [N] int64
    classes: int
    split: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)


def _val_mask(n):
    # Split membership is a pure function of the sample index: every fifth
    # sample goes to validation (80/20).
    return (np.arange(n) % 5) == 4


def synthetic_blobs(seed, classes=10, dim=20, n_per_class=100, noise=0.5, dtype=np.float64):
    """Gaussian clusters around fixed seeded centroids.

    Samples are generated class-major in a fixed order, then split 80/20 by
    index. Returns (train, val); both carry the centroids in ``meta``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if dim < 1 or n_per_class < 1:
        raise ValueError("dim and n_per_class must be positive")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    centroids = rng.normal(size=(classes, dim))
    labels = np.repeat(np.arange(classes, dtype=np.int64), n_per_class)
    n = labels.size
    x = centroids[labels] + noise * rng.normal(size=(n, dim))
    x = x.astype(dtype)
    val = _val_mask(n)
    meta = {"seed": seed, "noise": noise, "centroids": centroids, "kind": "blobs"}
    train_ds = Dataset(x[~val], labels[~val], classes, "train", dict(meta))
    val_ds = Dataset(x[val], labels[val], classes, "val", dict(meta))
    return train_ds, val_ds


# ---------------------------------------------------------------------------
# IDX files (big-endian magic + u32 dims, raw u8 payload)


def _read_exact(f, count, path, what):
    buf = f.read(count)
    if len(buf) != count:
        raise IdxTruncatedError(f"{path}: truncated while reading {what}")
    return buf


def read_idx_images(path):
    """Raw [N, rows, cols] uint8 images from an IDX3 file."""
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, path, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(
                f"{path}: bad magic 0x{magic:08x}, expected image magic 0x{IDX_IMAGES_MAGIC:08x}"
            )
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, path, "dimensions"))
        payload = _read_exact(f, n * rows * cols, path, "pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path):
    """Raw [N] uint8 labels from an IDX1 file."""
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, path, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(
                f"{path}: bad magic 0x{magic:08x}, expected label magic 0x{IDX_LABELS_MAGIC:08x}"
            )
        (n,) = struct.unpack(">I", _read_exact(f, 4, path, "count"))
        payload = _read_exact(f, n, path, "labels")
    return np.frombuffer(payload, dtype=np.uint8)


def write_idx_images(path, images):
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be [N, rows, cols], got shape {images.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ValueError(f"labels must be [N], got shape {labels.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        f.write(labels.tobytes())


def load_idx(images_path, labels_path, mean=None, std=None, split="train", dtype=np.float64):
    """Load an image/label IDX pair as a normalized flat-image Dataset.

    Pixels are scaled to [0, 1] and standardized. When ``mean``/``std`` are
    omitted they are computed from this file (the training split) and stored
    in ``meta`` so the validation split can reuse them.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    x = images.astype(dtype) / 255.0
    if mean is None:
        mean = float(x.mean())
        std = float(x.std())
    if std == 0:
        raise IdxFormatError(f"{images_path}: constant pixel data, cannot standardize")
    x = (x - mean) / std
    n, rows, cols = images.shape
    classes = int(labels.max()) + 1 if labels.size else 0
    meta = {"kind": "idx", "mean": mean, "std": std, "rows": rows, "cols": cols}
    return Dataset(x.reshape(n, rows * cols), labels.astype(np.int64), classes, split, meta)
