"""Dataset construction: synthetic Gaussian mixtures, IDX and CSV loaders.

All loaders produce the same `Dataset` shape: an N x D float64 feature
matrix, N integer labels in [0, K), and the class count K. Every class must
appear at least once because downstream per-class statistics divide by class
counts.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Raised when an input file violates its declared format."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError(
                f"labels shape {labels.shape} does not match {features.shape[0]} samples"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        if labels.size == 0:
            raise ValueError("dataset is empty")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        counts = np.bincount(labels, minlength=self.num_classes)
        if (counts == 0).any():
            missing = np.flatnonzero(counts == 0).tolist()
            raise ValueError(f"classes {missing} have no samples")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class GaussianSpec:
    """Isotropic Gaussian blobs, one per class, at caller-chosen centers."""

    means: np.ndarray  # K x D
    std: float
    per_class: int
    seed: int = 0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 2:
            raise ValueError("means must be a KxD array with K >= 2")
        if not self.std > 0:
            raise ValueError(f"std must be positive, got {self.std}")
        if self.per_class < 1:
            raise ValueError("per_class must be at least 1")
        object.__setattr__(self, "means", means)


def generate_gaussian(spec: GaussianSpec) -> Dataset:
    """Draw per_class samples around each class mean; class-major order.

    Normals are drawn sample-major then dimension-major within each class,
    so a fixed seed yields bit-identical features on every run.
    """
    k, dim = spec.means.shape
    rng = Rng(spec.seed)
    features = np.empty((k * spec.per_class, dim), dtype=np.float64)
    labels = np.empty(k * spec.per_class, dtype=np.int64)
    row = 0
    for c in range(k):
        for _ in range(spec.per_class):
            features[row] = spec.means[c] + spec.std * rng.normals((dim,))
            labels[row] = c
            row += 1
    return Dataset(features, labels, k)


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataFormatError(f"{path}: truncated file while reading {what}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (gzip accepted transparently).

    Images: big-endian magic 0x00000803 then N, H, W and N*H*W unsigned
    bytes. Labels: magic 0x00000801 then N and N unsigned bytes. Pixels are
    scaled to [0, 1] by dividing by 255 and flattened row-major to N x (H*W).
    """
    with _open_maybe_gzip(images_path) as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, images_path, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        n, h, w = struct.unpack(">III", _read_exact(f, 12, images_path, "dimensions"))
        raw = _read_exact(f, n * h * w, images_path, "pixel payload")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0

    with _open_maybe_gzip(labels_path) as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, labels_path, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        (n_labels,) = struct.unpack(">I", _read_exact(f, 4, labels_path, "count"))
        raw = _read_exact(f, n_labels, labels_path, "label payload")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n_labels != n:
        raise DataFormatError(
            f"image/label count mismatch: {n} images vs {n_labels} labels"
        )
    return Dataset(pixels.reshape(n, h * w), labels, int(labels.max()) + 1)


def load_csv(path, label_column: str) -> tuple[Dataset, dict]:
    """Load a rectangular numeric CSV with a header row.

    Labels are remapped to dense 0..K-1 in first-appearance order; the
    returned dict maps each original label value to its dense index.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [name.strip() for name in header]
        if label_column not in header:
            raise DataFormatError(
                f"{path}: no column named {label_column!r} in header {header}"
            )
        label_idx = header.index(label_column)
        feature_idx = [i for i in range(len(header)) if i != label_idx]

        rows = []
        raw_labels = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}"
                )
            try:
                values = [float(row[i]) for i in feature_idx]
                raw_labels.append(float(row[label_idx]))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{line_no}: non-numeric cell ({exc})") from None
            rows.append(values)

    if not rows:
        raise DataFormatError(f"{path}: no data rows")

    mapping: dict = {}
    labels = np.empty(len(raw_labels), dtype=np.int64)
    for i, value in enumerate(raw_labels):
        key = int(value) if value == int(value) else value
        if key not in mapping:
            mapping[key] = len(mapping)
        labels[i] = mapping[key]
    features = np.asarray(rows, dtype=np.float64)
    return Dataset(features, labels, len(mapping)), mapping


def save_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    """Write a dataset in the format load_csv reads (floats via repr)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"f{i}" for i in range(dataset.num_features)] + [label_column])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def stratified_split_indices(
    labels: np.ndarray, num_classes: int, train_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled index split; classes processed in increasing order.

    Each class contributes round(fraction * count) samples to the train side,
    clamped so both sides keep at least one sample per class.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels = np.asarray(labels, dtype=np.int64)
    rng = Rng(seed)
    train_parts = []
    test_parts = []
    for c in range(num_classes):
        class_idx = np.flatnonzero(labels == c)
        if class_idx.size < 2:
            raise ValueError(f"class {c} has {class_idx.size} sample(s); cannot stratify")
        shuffled = class_idx[rng.permutation(class_idx.size)]
        n_train = int(train_fraction * class_idx.size + 0.5)
        n_train = min(max(n_train, 1), class_idx.size - 1)
        train_parts.append(shuffled[:n_train])
        test_parts.append(shuffled[n_train:])
    return np.concatenate(train_parts), np.concatenate(test_parts)


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified deterministic split into (train, test)."""
    train_idx, test_idx = stratified_split_indices(
        dataset.labels, dataset.num_classes, train_fraction, seed
    )
    return dataset.subset(train_idx), dataset.subset(test_idx)
