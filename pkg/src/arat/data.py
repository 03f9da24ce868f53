"""Desk-scale datasets: synthetic oriented gratings and a raw byte container.

Container layout (little endian)::

    magic    8 bytes  b"ARATDSET"
    version  uint32   1
    count, channels, height, width, classes   uint32 each
    payload  count records of channels*height*width pixel bytes + 1 label byte
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"ARATDSET"
VERSION = 1
_HEADER = struct.Struct("<8s6I")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1], multiples of 1/255
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} do not match {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class AugmentationConfig:
    pad_crop: int = 4
    horizontal_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.pad_crop < 0:
            raise DataError(f"pad_crop must be non-negative, got {self.pad_crop}")


def grating(k: int, classes: int, size: int, channels: int = 1, contrast: float = 0.3,
            phase_offsets=(0.0,)) -> np.ndarray:
    """Noise-free grating of class ``k``, one image per phase offset: (m, C, H, W)."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    theta = math.pi * k / classes
    cycles = 2.0 + (k % 3)
    proj = math.cos(theta) * xx + math.sin(theta) * yy
    arg = 2 * math.pi * cycles * proj / size + math.pi * k / classes
    chan_shift = 0.5 * math.pi * np.arange(channels) / channels
    offsets = np.asarray(phase_offsets, dtype=np.float64)
    full = arg[None, None] + chan_shift[None, :, None, None] + offsets[:, None, None, None]
    return 0.5 + contrast * np.sin(full)


def quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def synth_generate(
    classes: int = 4,
    per_class: int = 700,
    size: int = 16,
    seed: int = 0,
    noise: float = 0.1,
    channels: int = 1,
    contrast: float = 0.3,
    phase_jitter: float = 0.0,
) -> Dataset:
    """Oriented sinusoidal gratings with class-specific orientation, frequency and phase.

    Each sample adds i.i.d. Gaussian pixel noise of std ``noise`` and, when
    ``phase_jitter`` > 0, a uniform random phase offset of up to
    ``phase_jitter * 2pi``.  Pixels are clipped to [0, 1] and quantised to
    the byte grid so the raw container round-trips exactly.
    """
    if classes < 2 or per_class < 1 or size < 8 or channels < 1:
        raise DataError(
            f"invalid sizes: classes={classes} (>=2), per_class={per_class} (>=1), "
            f"size={size} (>=8), channels={channels} (>=1)"
        )
    if noise < 0 or not 0 <= phase_jitter <= 1:
        raise DataError("noise must be >= 0 and phase_jitter in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    jitter = rng.uniform(0.0, 2 * math.pi * phase_jitter, size=labels.size)
    images = np.empty((labels.size, channels, size, size))
    for k in range(classes):
        rows = labels == k
        images[rows] = grating(k, classes, size, channels, contrast, jitter[rows])
    images += noise * rng.standard_normal(images.shape)
    return Dataset(quantize(images), labels, classes)


def train_test_split(ds: Dataset, test_per_class: int) -> tuple[Dataset, Dataset]:
    """Last ``test_per_class`` samples of each class form the test split."""
    train_idx, test_idx = [], []
    for k in range(ds.num_classes):
        rows = np.flatnonzero(ds.labels == k)
        if len(rows) <= test_per_class:
            raise DataError(f"class {k} has {len(rows)} samples, need more than {test_per_class}")
        train_idx.append(rows[:-test_per_class])
        test_idx.append(rows[-test_per_class:])
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


def make_splits(classes: int = 4, train_per_class: int = 500, test_per_class: int = 200,
                size: int = 16, seed: int = 0, **kwargs) -> tuple[Dataset, Dataset]:
    ds = synth_generate(classes, train_per_class + test_per_class, size, seed, **kwargs)
    return train_test_split(ds, test_per_class)


# -- raw container ---------------------------------------------------------------


def save_raw(ds: Dataset, path) -> None:
    n, c, h, w = ds.images.shape
    if ds.num_classes > 256:
        raise DataError("raw container stores labels in one byte (at most 256 classes)")
    pixels = np.round(np.clip(ds.images, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(n, -1)
    records = np.concatenate([pixels, ds.labels.astype(np.uint8)[:, None]], axis=1)
    header = _HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.num_classes)
    Path(path).write_bytes(header + records.tobytes())


def load_raw(path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(blob)} of {_HEADER.size} bytes)")
    magic, version, n, c, h, w, k = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = n * (c * h * w + 1)
    actual = len(blob) - _HEADER.size
    if actual != expected:
        raise DataError(f"{path}: payload is {actual} bytes, expected {expected}")
    records = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size).reshape(n, c * h * w + 1)
    labels = records[:, -1].astype(np.int64)
    if n and labels.max() >= k:
        raise DataError(f"{path}: label {labels.max()} out of range for {k} classes")
    images = records[:, :-1].reshape(n, c, h, w).astype(np.float64) / 255.0
    return Dataset(images, labels, k)


# -- batching and augmentation -----------------------------------------------------


def augment(batch: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Zero-pad, random crop back to the input size, optional horizontal flip."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n, c, h, w = batch.shape
    p = cfg.pad_crop
    out = batch.copy()
    if p:
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)))
        oy = rng.integers(0, 2 * p + 1, size=n)
        ox = rng.integers(0, 2 * p + 1, size=n)
        for i in range(n):
            out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    if cfg.horizontal_flip:
        flip = rng.random(n) < 0.5
        out[flip] = out[flip][..., ::-1]
    return out


def iterate_batches(
    ds: Dataset, batch_size: int, seed: int = 0, epoch: int = 0,
    shuffle: bool = True, drop_last: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(indices, images, labels)``; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise DataError(f"batch_size must be positive, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds)) if shuffle else np.arange(len(ds))
    stop = len(ds) - (len(ds) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        yield idx, ds.images[idx], ds.labels[idx]
