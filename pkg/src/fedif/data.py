"""Datasets: IDX / CIFAR-10 binary loaders, synthetic blobs, Dirichlet partitioning."""
from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetMissingError, FormatError, PartitionError, ShapeError
from .rng import as_generator

log = logging.getLogger(__name__)

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
CIFAR_RECORD = 1 + 3072


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.features.size and (self.features.min() < 0.0 or self.features.max() > 1.0):
            raise ValueError("feature values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.n_classes, name or self.name)


@dataclass(frozen=True, eq=False)
class Partition:
    """Per-client index arrays into a parent dataset."""

    indices: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.indices])


@dataclass(frozen=True, eq=False)
class ValidationSplit:
    validation: np.ndarray
    test: np.ndarray


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DatasetMissingError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need {header} bytes)")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated data at offset {len(raw)}, expected {expected} bytes")
    return dims


def load_idx(images_path, labels_path, name: str = "idx", n_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair (Fashion-MNIST layout); gzip is detected automatically."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    n_img, rows, cols = _idx_header(img, IDX_IMAGES_MAGIC, 3, images_path)
    (n_lab,) = _idx_header(lab, IDX_LABELS_MAGIC, 1, labels_path)
    if n_img != n_lab:
        raise FormatError(
            f"count mismatch: {images_path} declares {n_img} images at offset 4, "
            f"{labels_path} declares {n_lab} labels at offset 4"
        )
    pixels = np.frombuffer(img, dtype=np.uint8, count=n_img * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    features = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    classes = n_classes or (int(labels.max()) + 1 if n_lab else 10)
    return Dataset(features, labels, classes, name)


def load_cifar10(paths, name: str = "cifar10") -> Dataset:
    """Load and concatenate CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes per record)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    feats, labs = [], []
    for path in paths:
        raw = _read_bytes(path)
        n, rem = divmod(len(raw), CIFAR_RECORD)
        if rem:
            raise FormatError(
                f"{path}: truncated record {n} starting at offset {n * CIFAR_RECORD} "
                f"({rem} of {CIFAR_RECORD} bytes)"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
        if n and rec[:, 0].max() > 9:
            bad = int(np.argmax(rec[:, 0] > 9))
            raise FormatError(f"{path}: label {rec[bad, 0]} out of range at offset {bad * CIFAR_RECORD}")
        labs.append(rec[:, 0].astype(np.int64))
        feats.append(rec[:, 1:].astype(np.float64) / 255.0)
    if not feats:
        raise FormatError("no CIFAR-10 batch files given")
    return Dataset(np.concatenate(feats), np.concatenate(labs), 10, name)


def synth_blobs(classes: int, per_class: int, dim: int, spread: float, seed, center_box=(0.25, 0.75)) -> Dataset:
    """Gaussian clusters, one mean per class, clipped to [0, 1].

    Class means are drawn uniformly from ``center_box`` in every coordinate;
    points are mean plus ``spread`` times standard normal noise. Rows are
    shuffled, so any prefix is a random sample.
    """
    rng = as_generator(seed)
    lo, hi = center_box
    means = rng.uniform(lo, hi, size=(classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + spread * rng.standard_normal((classes * per_class, dim))
    np.clip(features, 0.0, 1.0, out=features)
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order].astype(np.int64), classes, "blobs")


def dirichlet_partition(dataset, n_clients: int, alpha: float, seed, min_size: int = 5,
                        max_retries: int = 1000) -> Partition:
    """Split examples across clients with a per-class Dirichlet(alpha) allocation.

    Draws are repeated until every client holds at least ``min_size`` examples.
    """
    if n_clients < 1:
        raise PartitionError("need at least one client")
    if alpha <= 0:
        raise PartitionError("alpha must be positive")
    labels = dataset.labels if isinstance(dataset, Dataset) else np.asarray(dataset)
    rng = as_generator(seed)
    classes = np.unique(labels)
    for attempt in range(max_retries):
        buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        parts = tuple(np.sort(np.concatenate(b)) for b in buckets)
        if min(len(p) for p in parts) >= min_size:
            if attempt:
                log.debug("dirichlet partition accepted after %d redraws", attempt)
            return Partition(parts)
    raise PartitionError(
        f"could not give all {n_clients} clients >= {min_size} examples in {max_retries} draws; "
        "use fewer clients or a smaller min_size"
    )


def split_validation(n_or_dataset, fraction: float = 0.2, seed=0) -> ValidationSplit:
    """Uniform random split of a test set into validation and test indices."""
    n = len(n_or_dataset) if not isinstance(n_or_dataset, (int, np.integer)) else int(n_or_dataset)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    perm = as_generator(seed).permutation(n)
    n_val = int(round(fraction * n))
    return ValidationSplit(np.sort(perm[:n_val]), np.sort(perm[n_val:]))
