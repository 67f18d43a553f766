"""Datasets and mini-batch task construction.

An unlabeled mini-batch becomes an N-way classification task: N rows are
drawn without replacement, each is augmented A times, and all views of a
row share its pseudo-label. Augmentations are vector-space analogues of
image augmentation (jitter, coordinate dropout, scaling).

Raw dataset file format (little-endian): magic ``GSDS``, version u32=1,
n u64, d u64, has_labels u8, then n*d float32 features row-major, then
(if has_labels) n int32 labels. A CIFAR-10 binary-batch adapter is also
provided (1 label byte + 3072 pixel bytes per record, pixels rescaled
to [0, 1]).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import stream
from .tensor import Tensor, as_tensor

RAW_MAGIC = b"GSDS"
RAW_VERSION = 1
CIFAR_RECORD_BYTES = 1 + 3072


class DatasetFormatError(Exception):
    pass


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class DimensionMismatchError(DatasetFormatError):
    pass


class TaskError(Exception):
    pass


@dataclass
class Dataset:
    """Feature matrix plus optional true labels (evaluation only)."""
    features: Tensor
    true_labels: list[int] | None = None
    name: str = ""

    def __post_init__(self):
        self.features = as_tensor(self.features)
        if self.features.data.ndim != 2:
            raise TaskError(f"dataset features must be 2-D, got shape {self.features.shape}")
        if self.true_labels is not None:
            self.true_labels = [int(x) for x in self.true_labels]
            if len(self.true_labels) != self.features.shape[0]:
                raise TaskError(
                    f"{len(self.true_labels)} labels for {self.features.shape[0]} rows")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class AugmentationSpec:
    noise_sigma: float = 0.05
    dropout_p: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise TaskError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise TaskError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise TaskError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")


IDENTITY_AUG = AugmentationSpec(noise_sigma=0.0, dropout_p=0.0, scale_range=(1.0, 1.0))


@dataclass(frozen=True)
class TaskBatch:
    """One augmented mini-batch viewed as an N-way classification task.

    Rows ``i*A .. i*A+A-1`` of ``views`` derive from source row ``i`` and
    carry pseudo-label ``i``.
    """
    views: Tensor
    pseudo_labels: tuple[int, ...]
    n_classes: int
    views_per_class: int
    source_indices: tuple[int, ...]

    def __post_init__(self):
        expected = tuple(i for i in range(self.n_classes) for _ in range(self.views_per_class))
        if self.pseudo_labels != expected:
            raise TaskError("pseudo-labels must be each class id repeated views_per_class times")
        if self.views.shape[0] != self.n_classes * self.views_per_class:
            raise TaskError(
                f"{self.views.shape[0]} view rows for {self.n_classes} x {self.views_per_class}")
        if len(set(self.source_indices)) != self.n_classes:
            raise TaskError("source_indices must be distinct")

    @property
    def n_views(self) -> int:
        return self.views.shape[0]

    def view_rows(self, view: int) -> np.ndarray:
        """Rows of the given view index (0..A-1), one per class."""
        idx = np.arange(self.n_classes) * self.views_per_class + view
        return self.views.data[idx]


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 8
    per_class: int = 100
    dim: int = 16
    center_scale: float = 3.0
    within_sigma: float = 1.0

    def __post_init__(self):
        if self.classes < 2 or self.per_class < 2 or self.dim < 2:
            raise TaskError("need classes >= 2, per_class >= 2, dim >= 2")
        if self.center_scale <= 0 or self.within_sigma < 0:
            raise TaskError("center_scale must be > 0 and within_sigma >= 0")


@dataclass(frozen=True)
class StreamKey:
    """Identifies the random streams of one task inside one episode."""
    master_seed: int
    episode: int = 0
    task: int = 0

    def generator(self, purpose: str, *extra: int) -> np.random.Generator:
        return stream(self.master_seed, purpose, self.episode, self.task, *extra)

    def for_task(self, task: int) -> "StreamKey":
        return StreamKey(self.master_seed, self.episode, task)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Gaussian blob dataset: seeded centers, per-class Gaussian samples.

    Centers are drawn from a sub-stream independent of within_sigma, so
    the same seed with within_sigma=0 reproduces the centers exactly.
    """
    centers = stream(seed, "synthetic", "centers").normal(
        size=(spec.classes, spec.dim)) * spec.center_scale
    rows = []
    labels = []
    for c in range(spec.classes):
        jitter = stream(seed, "synthetic", "class", c).normal(
            size=(spec.per_class, spec.dim)) * spec.within_sigma
        rows.append(centers[c] + jitter)
        labels.extend([c] * spec.per_class)
    return Dataset(features=np.vstack(rows), true_labels=labels,
                   name=f"blobs{spec.classes}x{spec.per_class}d{spec.dim}s{seed}")


def save_raw_dataset(dataset: Dataset, path) -> None:
    """Write the raw GSDS format (features stored as float32)."""
    n, d = dataset.features.shape
    has_labels = dataset.true_labels is not None
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<I", RAW_VERSION))
        fh.write(struct.pack("<Q", n))
        fh.write(struct.pack("<Q", d))
        fh.write(struct.pack("<B", 1 if has_labels else 0))
        fh.write(np.ascontiguousarray(dataset.features.data, dtype="<f4").tobytes())
        if has_labels:
            fh.write(np.asarray(dataset.true_labels, dtype="<i4").tobytes())


def load_raw_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    header = 4 + 4 + 8 + 8 + 1
    if len(blob) < header:
        raise TruncatedFileError(f"{path}: file shorter than the {header}-byte header")
    if blob[:4] != RAW_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {RAW_MAGIC!r}")
    version, = struct.unpack_from("<I", blob, 4)
    if version != RAW_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, reader supports {RAW_VERSION}")
    n, = struct.unpack_from("<Q", blob, 8)
    d, = struct.unpack_from("<Q", blob, 16)
    has_labels, = struct.unpack_from("<B", blob, 24)
    if n == 0 or d == 0:
        raise DimensionMismatchError(f"{path}: header declares n={n}, d={d}")
    expected = header + n * d * 4 + (n * 4 if has_labels else 0)
    if len(blob) < expected:
        raise TruncatedFileError(
            f"{path}: payload is {len(blob) - header} bytes, expected {expected - header}")
    if len(blob) > expected:
        raise DimensionMismatchError(
            f"{path}: {len(blob) - expected} trailing bytes beyond the declared n x d payload")
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=header).reshape(n, d)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<i4", count=n, offset=header + n * d * 4).tolist()
    return Dataset(features=feats.astype(np.float64), true_labels=labels, name=str(path))


def load_cifar10_batch(path, limit: int | None = None) -> Dataset:
    """Read a standard CIFAR-10 binary batch, rescaling pixels to [0, 1]."""
    blob = Path(path).read_bytes()
    if len(blob) == 0 or len(blob) % CIFAR_RECORD_BYTES != 0:
        raise TruncatedFileError(
            f"{path}: size {len(blob)} is not a multiple of {CIFAR_RECORD_BYTES}-byte records")
    records = len(blob) // CIFAR_RECORD_BYTES
    if limit is not None:
        records = min(records, int(limit))
    raw = np.frombuffer(blob, dtype=np.uint8,
                        count=records * CIFAR_RECORD_BYTES).reshape(records, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64).tolist()
    feats = raw[:, 1:].astype(np.float64) / 255.0
    return Dataset(features=feats, true_labels=labels, name=str(path))


def augment(row: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """(row * dropout_mask) * scale + noise, fully determined by ``rng``."""
    row = np.asarray(row, dtype=np.float64)
    mask = rng.random(row.shape) >= spec.dropout_p
    scale = rng.uniform(spec.scale_range[0], spec.scale_range[1])
    noise = rng.normal(0.0, spec.noise_sigma, size=row.shape)
    return row * mask * scale + noise


def make_task(dataset: Dataset, n_classes: int, views_per_class: int,
              aug: AugmentationSpec, key: StreamKey) -> TaskBatch:
    """Sample one pseudo-labeled task from the dataset.

    N distinct rows are drawn without replacement; each is augmented A
    times; pseudo-label i goes to all views of the i-th drawn row.
    """
    if n_classes > dataset.n_rows:
        raise TaskError(f"cannot draw {n_classes} distinct rows from {dataset.n_rows}")
    if views_per_class < 2:
        raise TaskError(f"views_per_class must be >= 2, got {views_per_class}")
    chosen = key.generator("sample").choice(dataset.n_rows, size=n_classes, replace=False)
    views = np.empty((n_classes * views_per_class, dataset.dim))
    labels = []
    for i, row_id in enumerate(chosen):
        row = dataset.features.data[row_id]
        for v in range(views_per_class):
            flat = i * views_per_class + v
            views[flat] = augment(row, aug, key.generator("augment", flat))
            labels.append(i)
    return TaskBatch(views=Tensor(views), pseudo_labels=tuple(labels),
                     n_classes=n_classes, views_per_class=views_per_class,
                     source_indices=tuple(int(r) for r in chosen))


def make_episode(dataset: Dataset, n_tasks: int, n_classes: int, views_per_class: int,
                 aug: AugmentationSpec, key: StreamKey) -> list[TaskBatch]:
    """n_tasks independent tasks; task j uses the (episode, j) stream key."""
    if n_tasks < 1:
        raise TaskError(f"an episode needs at least one task, got {n_tasks}")
    return [make_task(dataset, n_classes, views_per_class, aug, key.for_task(j))
            for j in range(n_tasks)]
