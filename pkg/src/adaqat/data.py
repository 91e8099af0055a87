"""Dataset parsing, augmentation and synthetic data.

Supported on-disk formats:

* MNIST IDX (big-endian; magic 2051 for images, 2049 for labels), plain or
  gzipped, under either the ``train-images-idx3-ubyte`` or the
  ``train-images.idx3-ubyte`` naming.
* CIFAR-10 binary batches (``data_batch_{1..5}.bin``, ``test_batch.bin``),
  3073-byte records: one label byte followed by 3072 channel-major pixels.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .tensor import DTYPE

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR10_RECORD = 1 + 3 * 32 * 32
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


class FormatError(ValueError):
    """A dataset file does not match its declared binary layout."""


@dataclass
class DatasetSplit:
    images: np.ndarray  # N x C x H x W, normalized float32
    labels: np.ndarray  # N, int64
    class_count: int
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise FormatError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "DatasetSplit":
        return DatasetSplit(self.images[idx], self.labels[idx], self.class_count, self.mean, self.std)

    def denormalize(self) -> np.ndarray:
        """Map images back to [0, 1] pixel intensities."""
        if not self.mean:
            return self.images.copy()
        view = (1, -1, 1, 1)
        return self.images * np.asarray(self.std, DTYPE).reshape(view) + np.asarray(self.mean, DTYPE).reshape(view)


@dataclass
class AugmentationPolicy:
    pad_crop: bool = True
    padding: int = 4
    flip_prob: float = 0.5

    @classmethod
    def none(cls) -> "AugmentationPolicy":
        return cls(pad_crop=False, padding=0, flip_prob=0.0)

    @property
    def enabled(self) -> bool:
        return (self.pad_crop and self.padding > 0) or self.flip_prob > 0


def normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    """uint8 N x C x H x W -> float32, scaled to [0, 1] then standardized per channel."""
    x = pixels.astype(DTYPE) / DTYPE(255)
    view = (1, -1, 1, 1)
    return (x - np.asarray(mean, DTYPE).reshape(view)) / np.asarray(std, DTYPE).reshape(view)


# ---------------------------------------------------------------------------
# MNIST


def _open_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _find(directory: Path, stem: str) -> Path:
    alt = stem.replace("-idx", ".idx")  # both spellings circulate
    for name in (stem, alt, f"{stem}.gz", f"{alt}.gz"):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem} file in {directory}")


def parse_idx(buf: bytes, expected_magic: int, what: str = "idx") -> np.ndarray:
    """Parse an IDX byte buffer of unsigned bytes, checking size against the header."""
    if len(buf) < 8:
        raise FormatError(f"{what}: truncated header ({len(buf)} bytes) at offset 0")
    magic, = struct.unpack(">i", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic {magic} at offset 0 (expected {expected_magic})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{what}: truncated dimension table at offset 4")
    dims = struct.unpack(f">{ndim}i", buf[4:header])
    need = header + int(np.prod(dims))
    if len(buf) != need:
        raise FormatError(f"{what}: header declares {need} bytes but file has {len(buf)} "
                          f"(mismatch at offset {min(len(buf), need)})")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def _load_mnist_pair(directory: Path, prefix: str) -> DatasetSplit:
    img_path = _find(directory, f"{prefix}-images-idx3-ubyte")
    lab_path = _find(directory, f"{prefix}-labels-idx1-ubyte")
    images = parse_idx(_open_bytes(img_path), IDX_IMAGES_MAGIC, str(img_path))
    labels = parse_idx(_open_bytes(lab_path), IDX_LABELS_MAGIC, str(lab_path))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{img_path.name} has {images.shape[0]} images but {lab_path.name} "
                          f"has {labels.shape[0]} labels")
    x = normalize(images[:, None, :, :], MNIST_MEAN, MNIST_STD)
    return DatasetSplit(x, labels.astype(np.int64), 10, MNIST_MEAN, MNIST_STD)


def load_mnist(directory) -> tuple[DatasetSplit, DatasetSplit]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"MNIST directory not found: {directory}")
    return _load_mnist_pair(directory, "train"), _load_mnist_pair(directory, "t10k")


# ---------------------------------------------------------------------------
# CIFAR-10


def parse_cifar10_batch(buf: bytes, what: str = "cifar") -> tuple[np.ndarray, np.ndarray]:
    if len(buf) % CIFAR10_RECORD:
        raise FormatError(f"{what}: {len(buf)} bytes is not a multiple of the {CIFAR10_RECORD}-byte record "
                          f"(misaligned tail at offset {len(buf) - len(buf) % CIFAR10_RECORD})")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{what}: label {labels[bad]} out of range at offset {bad * CIFAR10_RECORD}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def stratified_indices(labels: np.ndarray, size: int, classes: int, seed: int) -> np.ndarray:
    """Deterministic class-balanced subset of ``size`` indices (size // classes per class)."""
    per = size // classes
    if per * classes != size:
        raise ValueError(f"subset size {size} is not divisible by {classes} classes")
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        if idx.size < per:
            raise ValueError(f"class {c} has only {idx.size} samples, {per} requested")
        picks.append(np.sort(rng.choice(idx, per, replace=False)))
    return np.sort(np.concatenate(picks))


def load_cifar10(directory, subset: Optional[int] = None, seed: int = 0) -> tuple[DatasetSplit, DatasetSplit]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {directory}")
    xs, ys = [], []
    for name in CIFAR10_TRAIN_FILES:
        p = directory / name
        if not p.exists():
            raise FileNotFoundError(f"missing CIFAR-10 batch {p}")
        x, y = parse_cifar10_batch(p.read_bytes(), str(p))
        xs.append(x)
        ys.append(y)
    tp = directory / CIFAR10_TEST_FILE
    if not tp.exists():
        raise FileNotFoundError(f"missing CIFAR-10 batch {tp}")
    xt, yt = parse_cifar10_batch(tp.read_bytes(), str(tp))
    x, y = np.concatenate(xs), np.concatenate(ys)
    if subset is not None:
        idx = stratified_indices(y, subset, 10, seed)
        x, y = x[idx], y[idx]
    train = DatasetSplit(normalize(x, CIFAR10_MEAN, CIFAR10_STD), y, 10, CIFAR10_MEAN, CIFAR10_STD)
    test = DatasetSplit(normalize(xt, CIFAR10_MEAN, CIFAR10_STD), yt, 10, CIFAR10_MEAN, CIFAR10_STD)
    return train, test


# ---------------------------------------------------------------------------
# synthetic


def synthetic_blobs(classes: int, dims: int, n: int, seed: int = 0, separation: float = 10.0,
                    spread: float = 1.0) -> DatasetSplit:
    """Isotropic Gaussian clusters; centers sit ``separation`` spreads apart along random directions.

    Samples are returned with shape ``n x dims x 1 x 1`` so they flow through
    the same image pipeline as the real datasets.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((classes, dims))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = dirs * (separation * spread / 2)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    x = centers[labels] + rng.standard_normal((n, dims)) * spread
    return DatasetSplit(x.reshape(n, dims, 1, 1).astype(DTYPE), labels, classes)


# ---------------------------------------------------------------------------
# augmentation and batching


def augment(sample: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator | None = None,
            offset: tuple[int, int] | None = None, flip: bool | None = None) -> np.ndarray:
    """Pad-and-random-crop then random horizontal flip of one C x H x W sample.

    ``offset`` and ``flip`` override the random draws (crop offset is measured
    in the padded image, so ``(0, 0)`` shifts content by ``padding`` pixels).
    """
    x = sample
    if policy.pad_crop and policy.padding > 0:
        p = policy.padding
        _, h, w = x.shape
        padded = np.pad(x, ((0, 0), (p, p), (p, p)))
        if offset is None:
            offset = (int(rng.integers(0, 2 * p + 1)), int(rng.integers(0, 2 * p + 1)))
        i, j = offset
        x = padded[:, i:i + h, j:j + w]
    if flip is None:
        flip = policy.flip_prob > 0 and bool(rng.random() < policy.flip_prob)
    if flip:
        x = x[:, :, ::-1]
    return np.ascontiguousarray(x, dtype=DTYPE)


def augment_batch(images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`augment` over a batch; draws all offsets, then all flips."""
    n, c, h, w = images.shape
    x = images
    if policy.pad_crop and policy.padding > 0:
        p = policy.padding
        padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
        oi = rng.integers(0, 2 * p + 1, size=n)
        oj = rng.integers(0, 2 * p + 1, size=n)
        rows = oi[:, None] + np.arange(h)[None, :]
        cols = oj[:, None] + np.arange(w)[None, :]
        x = padded[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                   rows[:, None, :, None], cols[:, None, None, :]]
    if policy.flip_prob > 0:
        flips = rng.random(n) < policy.flip_prob
        x = np.where(flips[:, None, None, None], x[:, :, :, ::-1], x)
    return np.ascontiguousarray(x, dtype=DTYPE)


def iterate_batches(split: DatasetSplit, batch_size: int, rng: np.random.Generator | None = None,
                    policy: AugmentationPolicy | None = None, min_batch: int = 2
                    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches; shuffles and augments only when ``rng`` is given."""
    n = len(split)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size < min_batch:
            break
        xb = split.images[idx]
        if rng is not None and policy is not None and policy.enabled:
            xb = augment_batch(xb, policy, rng)
        yield xb, split.labels[idx]


def default_data_dir() -> Optional[str]:
    return os.environ.get("ADAQAT_DATA_DIR")
