"""CIFAR binary ingestion, normalization, augmentation and synthetic data.

Images stay as raw 0-255 values (float64) inside a ``Dataset``; normalization
is applied to batches after augmentation so the zero padding of random crops
is pixel value 0.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .tensor import DTYPE, Rng

IMAGE_BYTES = 3 * 32 * 32
RECORD_LAYOUT = {
    # kind: (label bytes, num classes)
    "cifar10": (1, 10),
    "cifar100": (2, 100),
}
NORM_SCALE = 128.0


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, 32, 32), raw byte values as floats
    labels: np.ndarray  # (N,) int64
    num_classes: int
    channel_means: np.ndarray | None = None
    coarse_labels: np.ndarray | None = None
    source_indices: np.ndarray | None = None
    class_ids: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def with_means(self) -> "Dataset":
        return replace(self, channel_means=compute_channel_means(self.images))


def compute_channel_means(images: np.ndarray) -> np.ndarray:
    return images.mean(axis=(0, 2, 3))


# ------------------------------------------------------------------ binary io


def parse_cifar_bytes(raw: bytes, kind: str = "cifar10") -> Dataset:
    label_bytes, num_classes = RECORD_LAYOUT[kind]
    rec = label_bytes + IMAGE_BYTES
    if len(raw) % rec:
        raise FormatError(f"{len(raw)} bytes is not a whole number of {rec}-byte records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    if len(labels) and labels.max() >= num_classes:
        raise DataError(f"label {labels.max()} out of range for {kind}")
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).astype(DTYPE)
    coarse = arr[:, 0].astype(np.int64) if label_bytes == 2 else None
    return Dataset(images, labels, num_classes, coarse_labels=coarse)


def read_cifar_binary(path, kind: str = "cifar10") -> Dataset:
    """Read one CIFAR-10 (3073-byte records) or CIFAR-100 (3074-byte) binary file."""
    return parse_cifar_bytes(Path(path).read_bytes(), kind)


def cifar_bytes(ds: Dataset, kind: str = "cifar10") -> bytes:
    """Serialize back to the binary record layout (inverse of ``parse_cifar_bytes``)."""
    label_bytes, _ = RECORD_LAYOUT[kind]
    n = len(ds)
    out = np.empty((n, label_bytes + IMAGE_BYTES), dtype=np.uint8)
    if label_bytes == 2:
        coarse = ds.coarse_labels if ds.coarse_labels is not None else np.zeros(n, np.int64)
        out[:, 0] = coarse
    out[:, label_bytes - 1] = ds.labels
    out[:, label_bytes:] = ds.images.reshape(n, -1).astype(np.uint8)
    return out.tobytes()


def write_cifar_binary(ds: Dataset, path, kind: str = "cifar10") -> None:
    Path(path).write_bytes(cifar_bytes(ds, kind))


def _concat(parts: list[Dataset]) -> Dataset:
    coarse = None
    if all(p.coarse_labels is not None for p in parts):
        coarse = np.concatenate([p.coarse_labels for p in parts])
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   parts[0].num_classes, coarse_labels=coarse)


CIFAR_FILES = {
    "cifar10": ("cifar-10-batches-bin", [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100": ("cifar-100-binary", ["train.bin"], ["test.bin"]),
}


def load_cifar(data_dir, kind: str = "cifar10") -> tuple[Dataset, Dataset]:
    """Load the train and test splits from the standard binary distribution.

    ``data_dir`` may point at the extracted folder itself or its parent.
    """
    sub, train_names, test_names = CIFAR_FILES[kind]
    root = Path(data_dir)
    if (root / sub).is_dir():
        root = root / sub
    missing = [n for n in train_names + test_names if not (root / n).is_file()]
    if missing:
        raise DataError(f"{kind} binary files not found under {data_dir}: missing {missing}")
    train = _concat([read_cifar_binary(root / n, kind) for n in train_names]).with_means()
    test = _concat([read_cifar_binary(root / n, kind) for n in test_names])
    return train, test


def default_data_dir() -> str | None:
    return os.environ.get("DROPFILTER_DATA_DIR")


# ------------------------------------------------------------- preprocessing


def normalize_images(images: np.ndarray, means: np.ndarray) -> np.ndarray:
    return (images - means[None, :, None, None]) / NORM_SCALE


def denormalize_images(images: np.ndarray, means: np.ndarray) -> np.ndarray:
    return images * NORM_SCALE + means[None, :, None, None]


def normalize(ds: Dataset, means: np.ndarray | None = None) -> Dataset:
    """Subtract per-channel means (from the training split) and divide by 128."""
    means = ds.channel_means if means is None else means
    if means is None:
        raise DataError("channel means are missing; compute them on the training split first")
    return replace(ds, images=normalize_images(ds.images, np.asarray(means, dtype=DTYPE)),
                   channel_means=np.asarray(means, dtype=DTYPE))


@dataclass
class AugmentPolicy:
    pad: int = 4
    crop: tuple[int, int] = (32, 32)
    hflip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.pad < 0:
            raise DataError("pad must be nonnegative")


def augment(img: np.ndarray, policy: AugmentPolicy, rng: Rng | None = None,
            offset: tuple[int, int] | None = None, flip: bool | None = None) -> np.ndarray:
    """Zero-pad, take a random crop, and flip horizontally with probability ``hflip_prob``.

    ``offset`` (row, col into the padded image) and ``flip`` force the random
    choices; anything not forced is drawn from ``rng``.
    """
    if not policy.enabled:
        return img
    c, h, w = img.shape
    p = policy.pad
    ch, cw = policy.crop
    if ch > h + 2 * p or cw > w + 2 * p:
        raise DataError(f"crop {policy.crop} does not fit padded size {(h + 2 * p, w + 2 * p)}")
    if offset is None:
        offset = (int(rng.integers(0, h + 2 * p - ch + 1)), int(rng.integers(0, w + 2 * p - cw + 1)))
    if flip is None:
        flip = bool(rng.random() < policy.hflip_prob)
    padded = np.pad(img, ((0, 0), (p, p), (p, p))) if p else img
    dy, dx = offset
    out = padded[:, dy:dy + ch, dx:dx + cw]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


# ------------------------------------------------------------------ subsets


def subset_sample(ds: Dataset, classes: int, per_class: int, rng: Rng,
                  class_ids=None) -> Dataset:
    """Stratified subset: ``per_class`` random examples from each of ``classes`` classes.

    Classes are drawn at random unless ``class_ids`` is given; labels are
    remapped to 0..classes-1 in ascending order of the original ids.
    ``per_class=0`` keeps every example of the chosen classes.
    """
    if class_ids is None:
        if classes > ds.num_classes:
            raise DataError(f"asked for {classes} classes, dataset has {ds.num_classes}")
        class_ids = np.sort(rng.permutation(ds.num_classes)[:classes])
    class_ids = np.asarray(sorted(int(c) for c in class_ids), dtype=np.int64)
    picked = []
    for c in class_ids:
        idx = np.flatnonzero(ds.labels == c)
        if per_class == 0:
            picked.append(idx)
            continue
        if len(idx) < per_class:
            raise DataError(f"class {c} has {len(idx)} examples, {per_class} requested")
        picked.append(np.sort(idx[rng.permutation(len(idx))[:per_class]]))
    indices = np.concatenate(picked) if picked else np.empty(0, np.int64)
    remap = np.full(ds.num_classes, -1, dtype=np.int64)
    remap[class_ids] = np.arange(len(class_ids))
    coarse = None if ds.coarse_labels is None else ds.coarse_labels[indices]
    return Dataset(ds.images[indices], remap[ds.labels[indices]], len(class_ids),
                   coarse_labels=coarse, source_indices=indices, class_ids=class_ids)


# ---------------------------------------------------------------- synthetic


_LEVELS = (0.15, 0.55, 1.0)
PALETTE = np.array([(r, g, b) for r in _LEVELS for g in _LEVELS for b in _LEVELS
                    if not r == g == b], dtype=DTYPE)


def _class_layout(classes: int, rng: Rng):
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.stack([15.5 + 8.0 * np.sin(angles), 15.5 + 8.0 * np.cos(angles)], axis=1)
    if classes <= len(PALETTE):
        colors = PALETTE[np.sort(rng.permutation(len(PALETTE))[:classes])]
    else:
        colors = 0.15 + 0.85 * rng.random((classes, 3))
    return centers, colors


def synthetic_dataset(classes: int, per_class: int, seed: int, split: str = "train") -> Dataset:
    """Class-dependent bright Gaussian blobs on a noisy background.

    Class k puts a blob of a class-specific colour (distinct palette entries
    for up to 24 classes) at a class-specific point on a ring around the
    image centre. The layout depends only on ``seed``;
    ``split`` selects an independent draw of the per-image noise.
    """
    if classes < 2:
        raise DataError("synthetic dataset needs at least two classes")
    base = Rng(seed).child("synthetic")
    centers, colors = _class_layout(classes, base.child("layout"))
    rng = base.child(split)
    n = classes * per_class
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    jitter = rng.normal((n, 2), 1.0)
    yy, xx = np.mgrid[0:32, 0:32].astype(DTYPE)
    cy = centers[labels, 0] + jitter[:, 0]
    cx = centers[labels, 1] + jitter[:, 1]
    blob = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / (2 * 4.0 ** 2))
    images = 40.0 + 200.0 * colors[labels][:, :, None, None] * blob[:, None]
    images += rng.normal(images.shape, 25.0)
    images = np.clip(np.round(images), 0, 255)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], classes)
