"""CIFAR-100 binary I/O, synthetic datasets, augmentation and deterministic batching."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigurationError, DataFormatError
from .pgm import read_pgm

CIFAR_RECORD = 2 + 3 * 32 * 32
CIFAR_TRAIN_N = 50000
CIFAR_TEST_N = 10000
CIFAR_CLASSES = 100
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)


@dataclass
class Dataset:
    """Images kept as uint8 N x C x H x W; promoted to floats only when batched."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = CIFAR_CLASSES

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataFormatError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


# --------------------------------------------------------------------------
# CIFAR binary format
# --------------------------------------------------------------------------

def read_cifar_bin(path, expected_records: Optional[int] = None):
    """Parse ``coarse, fine, 3072 pixel bytes`` records.  Returns ``(images, coarse, fine)``."""
    raw = np.fromfile(path, dtype=np.uint8)
    if expected_records is not None and raw.size != expected_records * CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: expected {expected_records * CIFAR_RECORD} bytes "
            f"({expected_records} records of {CIFAR_RECORD}), got {raw.size}"
        )
    if raw.size % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: size {raw.size} bytes is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    recs = raw.reshape(-1, CIFAR_RECORD)
    images = recs[:, 2:].reshape(-1, 3, 32, 32).copy()
    return images, recs[:, 0].astype(np.int64), recs[:, 1].astype(np.int64)


def write_cifar_bin(path, images: np.ndarray, fine: np.ndarray, coarse: Optional[np.ndarray] = None) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != (3, 32, 32):
        raise DataFormatError(f"CIFAR records hold uint8 3x32x32 images, got {images.dtype} {images.shape}")
    n = len(images)
    coarse = np.zeros(n, dtype=np.uint8) if coarse is None else np.asarray(coarse, dtype=np.uint8)
    recs = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = coarse
    recs[:, 1] = np.asarray(fine, dtype=np.uint8)
    recs[:, 2:] = images.reshape(n, -1)
    recs.tofile(path)


def load_cifar100(directory, strict: bool = True) -> tuple[Dataset, Dataset]:
    """Load ``train.bin``/``test.bin``.  ``strict`` enforces the 50000/10000 record counts."""
    out = []
    for split, n in (("train", CIFAR_TRAIN_N), ("test", CIFAR_TEST_N)):
        images, _, fine = read_cifar_bin(os.path.join(directory, f"{split}.bin"), n if strict else None)
        out.append(Dataset(images, fine, split, CIFAR_CLASSES))
    return out[0], out[1]


def save_cifar_layout(directory, train: Dataset, test: Dataset) -> None:
    os.makedirs(directory, exist_ok=True)
    write_cifar_bin(os.path.join(directory, "train.bin"), train.images, train.labels)
    write_cifar_bin(os.path.join(directory, "test.bin"), test.images, test.labels)


def load_pgm_folder(directory, channels: int = 3, num_classes: Optional[int] = None, split: str = "train") -> Dataset:
    """Read ``labels.csv`` (``filename,label``) and the P5 images it names.

    Grayscale planes are repeated ``channels`` times so the result feeds RGB models.
    """
    names, labels = [], []
    with open(os.path.join(directory, "labels.csv"), newline="") as f:
        for row in csv.DictReader(f):
            names.append(row["filename"])
            labels.append(int(row["label"]))
    if not names:
        raise DataFormatError(f"{directory}/labels.csv lists no images")
    imgs = [read_pgm(os.path.join(directory, n)) for n in names]
    if len({im.shape for im in imgs}) != 1:
        raise DataFormatError("all images in a PGM folder must share one size")
    stack = np.stack(imgs)[:, None].repeat(channels, axis=1)
    k = num_classes if num_classes is not None else max(labels) + 1
    return Dataset(stack, np.array(labels), split, k)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def class_templates(classes: int, channels: int) -> np.ndarray:
    """Per-class, per-channel constant intensity levels, shape (classes, channels).

    Channel 0 spaces the classes evenly over [32, 223]; further channels use
    rotations of that ladder so every class has a distinct colour.
    """
    ladder = 32 + 191 * np.arange(classes) / max(classes - 1, 1)
    step = classes // 3 + 1
    return np.stack([ladder[(np.arange(classes) + c * step) % classes] for c in range(channels)], axis=1)


def synthetic_dataset(classes: int = 8, per_class: int = 32, size=(3, 32, 32), seed: int = 0,
                      noise: float = 8.0, split: str = "train") -> Dataset:
    """Class-indexed constant images plus seeded gaussian pixel noise (std ``noise``, 0-255 scale).

    Samples are ordered class by class.
    """
    if classes < 2:
        raise ConfigurationError("synthetic_dataset needs at least two classes")
    c, h, w = size
    rng = np.random.default_rng(seed)
    levels = class_templates(classes, c)
    labels = np.repeat(np.arange(classes), per_class)
    base = levels[labels][:, :, None, None] * np.ones((1, 1, h, w))
    pixels = base + noise * rng.standard_normal(base.shape)
    images = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return Dataset(images, labels, split, classes)


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Preproc:
    mean: tuple = CIFAR100_MEAN
    std: tuple = CIFAR100_STD
    crop_pad: int = 4
    flip: bool = True
    size: Optional[int] = None  # None keeps the native resolution

    def __post_init__(self):
        if len(self.mean) != len(self.std) or min(self.std) <= 0:
            raise ConfigurationError("Preproc needs one positive std per mean entry")

    def without_augmentation(self) -> "Preproc":
        return Preproc(self.mean, self.std, 0, False, self.size)


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of ``images / 255`` over the whole dataset."""
    x = ds.images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1]


def random_crop(x: np.ndarray, pad: int, offsets: np.ndarray) -> np.ndarray:
    """Zero-pad by ``pad`` and cut each sample at its (dy, dx) offset in [0, 2*pad]."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = xp[i, :, dy:dy + h, dx:dx + w]
    return out


def resize_bilinear(x: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of N x C x H x W to ``size`` x ``size`` (half-pixel centres, align_corners=False)."""
    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(x.dtype)

    h, w = x.shape[2:]
    y0, y1, wy = axis_weights(h, size)
    x0, x1, wx = axis_weights(w, size)
    rows = x[:, :, y0, :] * (1 - wy)[:, None] + x[:, :, y1, :] * wy[:, None]
    return rows[:, :, :, x0] * (1 - wx) + rows[:, :, :, x1] * wx


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray = field(repr=False)


def make_batches(ds: Dataset, batch_size: int, epoch_seed: int, preproc: Preproc,
                 train_mode: bool, dtype=np.float32) -> Iterator[Batch]:
    """Yield batches in a seeded shuffled order (train) or dataset order (eval).

    The final partial batch is kept.  Augmentation draws come from the same
    per-epoch generator as the shuffle, so ``(ds, epoch_seed)`` fixes every
    batch exactly.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    dtype = np.dtype(dtype)
    n = len(ds)
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(n) if train_mode else np.arange(n)
    mean = np.asarray(preproc.mean, dtype=dtype).reshape(1, -1, 1, 1)
    std = np.asarray(preproc.std, dtype=dtype).reshape(1, -1, 1, 1)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = ds.images[idx].astype(dtype) / dtype.type(255.0)
        if train_mode and preproc.crop_pad:
            offsets = rng.integers(0, 2 * preproc.crop_pad + 1, size=(len(idx), 2))
            x = random_crop(x, preproc.crop_pad, offsets)
        if train_mode and preproc.flip:
            flips = rng.random(len(idx)) < 0.5
            x[flips] = hflip(x[flips])
        if preproc.size is not None and preproc.size != x.shape[2]:
            x = resize_bilinear(x, preproc.size)
        x = (x - mean) / std
        yield Batch(np.ascontiguousarray(x, dtype=dtype), ds.labels[idx], idx)
