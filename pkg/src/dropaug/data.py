"""Dataset ingestion, splits, PCA without whitening, synthetic blobs.

Feature matrices are (samples x dims) float64; labels are non-negative
int64 class indices with the class count inferred as max + 1. Image
datasets remember their (height, width) so renders can be emitted later.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, FormatError, IoError, ShapeError
from .linalg import RngStream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray          # (samples, dims) float64
    labels: np.ndarray            # (samples,) int64
    image_shape: tuple | None = None
    split_tag: str = "full"

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_dims(self) -> int:
        return self.features.shape[1]

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def validate(self) -> "Dataset":
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError(
                f"{self.labels.shape} labels for {self.features.shape[0]} samples"
            )
        if not np.isfinite(self.features).all():
            raise FormatError("dataset contains non-finite feature values")
        if self.labels.size and self.labels.min() < 0:
            raise FormatError("labels must be non-negative class indices")
        return self

    def take(self, indices, split_tag: str) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices],
                       self.image_shape, split_tag)


@dataclass
class PcaTransform:
    """Mean and top-k orthonormal covariance eigenvectors, no whitening."""

    mean: np.ndarray          # (1, dims)
    components: np.ndarray    # (dims, k), columns orthonormal
    eigenvalues: np.ndarray   # (k,), non-increasing


def _read_exact(f, count: int, what: str, offset: int) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise FormatError(f"truncated IDX file: {what} at byte offset {offset}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files; pixels scale to [0, 1]."""
    try:
        img_file = open(images_path, "rb")
    except OSError as e:
        raise IoError(f"cannot read {images_path}: {e}") from e
    with img_file as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "image magic", 0))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"bad image magic 0x{magic:08x} at byte offset 0 in {images_path}"
            )
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, "image dims", 4))
        pixels = _read_exact(f, count * rows * cols, "pixel data", 16)
        extra = f.read(1)
        if extra:
            raise FormatError(f"trailing bytes at byte offset {16 + len(pixels)} "
                              f"in {images_path}")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols)

    try:
        lbl_file = open(labels_path, "rb")
    except OSError as e:
        raise IoError(f"cannot read {labels_path}: {e}") from e
    with lbl_file as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "label magic", 0))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"bad label magic 0x{magic:08x} at byte offset 0 in {labels_path}"
            )
        (label_count,) = struct.unpack(">I", _read_exact(f, 4, "label count", 4))
        if label_count != count:
            raise FormatError(
                f"{label_count} labels for {count} images (count field at byte offset 4)"
            )
        raw_labels = _read_exact(f, label_count, "label data", 8)
        extra = f.read(1)
        if extra:
            raise FormatError(f"trailing bytes at byte offset {8 + label_count} "
                              f"in {labels_path}")
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    features = images.astype(np.float64) / 255.0
    return Dataset(features, labels, image_shape=(rows, cols)).validate()


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as IDX files.

    Exact byte-level inverse of ``load_idx`` up to the [0, 1] pixel
    scaling (see ``dataset_to_idx``).
    """
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ShapeError(f"images must be (n, rows, cols), got shape {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ShapeError(f"{labels.shape} labels for {images.shape[0]} images")
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(labels.tobytes())


def dataset_to_idx(data: Dataset, images_path, labels_path) -> None:
    """Round the [0, 1] features back to uint8 pixels and write IDX files."""
    if data.image_shape is None:
        raise ConfigError("dataset has no image shape; cannot emit IDX images")
    rows, cols = data.image_shape
    pixels = np.rint(np.clip(data.features, 0.0, 1.0) * 255.0).astype(np.uint8)
    write_idx(pixels.reshape(-1, rows, cols), data.labels.astype(np.uint8),
              images_path, labels_path)


def load_csv_features(path, label_column: str) -> Dataset:
    """Rectangular numeric CSV with a header; one column holds the labels."""
    try:
        f = open(path, "r", newline="")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    with f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path} is empty") from None
        if label_column not in header:
            raise ConfigError(f"label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        feature_idx = [i for i in range(len(header)) if i != label_idx]
        features, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(
                    f"row at line {line_no} has {len(row)} cells, expected {len(header)}"
                )
            try:
                values = [float(row[i]) for i in feature_idx]
            except ValueError as e:
                raise FormatError(f"non-numeric cell at line {line_no}: {e}") from None
            raw = row[label_idx]
            try:
                label = int(raw)
            except ValueError:
                raise FormatError(
                    f"label at line {line_no} must be an integer, got {raw!r}"
                ) from None
            if label < 0:
                raise FormatError(f"negative label at line {line_no}")
            features.append(values)
            labels.append(label)
    if not features:
        raise FormatError(f"{path} has a header but no data rows")
    return Dataset(np.asarray(features, dtype=np.float64),
                   np.asarray(labels, dtype=np.int64)).validate()


def split(data: Dataset, fractions, stream: RngStream):
    """Deterministic shuffled partition into (train, valid, test).

    The three index sets are consecutive slices of one seeded
    permutation; a positive fraction that rounds to zero samples is a
    configuration error, a zero fraction yields an empty part.
    """
    if len(fractions) != 3:
        raise ConfigError(f"expected 3 fractions, got {len(fractions)}")
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions):
        raise ConfigError(f"fractions must be non-negative, got {fractions}")
    if sum(fractions) > 1.0 + 1e-9:
        raise ConfigError(f"fractions sum to {sum(fractions)} > 1")
    n = data.n_samples
    counts = [int(round(n * f)) for f in fractions]
    while sum(counts) > n:
        counts[int(np.argmax(counts))] -= 1
    for f, c in zip(fractions, counts):
        if f > 0 and c == 0:
            raise ConfigError(f"fraction {f} of {n} samples rounds to an empty split")
    perm = stream.permutation(n)
    bounds = np.cumsum([0] + counts)
    tags = ("train", "valid", "test")
    return tuple(
        data.take(perm[bounds[i]:bounds[i + 1]], tags[i]) for i in range(3)
    )


def pca_fit(data: Dataset, k: int) -> PcaTransform:
    """Top-k eigendecomposition of the feature covariance; no whitening.

    Projected coordinates keep their raw variances (the eigenvalues);
    nothing is rescaled to unit variance.
    """
    x = data.features
    n, dims = x.shape
    if k < 1 or k > dims:
        raise ConfigError(f"k must be in [1, {dims}], got {k}")
    if n < 2:
        raise ConfigError(f"PCA needs at least 2 samples, got {n}")
    mean = x.mean(axis=0, keepdims=True)
    centered = x - mean
    cov = (centered.T @ centered) / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:k]
    values = eigenvalues[order]
    components = eigenvectors[:, order]
    # deterministic sign: largest-magnitude entry of each component positive
    for j in range(components.shape[1]):
        col = components[:, j]
        pivot = np.argmax(np.abs(col))
        if col[pivot] < 0:
            components[:, j] = -col
    return PcaTransform(mean=mean, components=components,
                        eigenvalues=np.asarray(values, dtype=np.float64))


def pca_transform(t: PcaTransform, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != t.components.shape[0]:
        raise ShapeError(
            f"input shape {x.shape} does not match PCA dims {t.components.shape[0]}"
        )
    return (x - t.mean) @ t.components


def pca_inverse_transform(t: PcaTransform, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != t.components.shape[1]:
        raise ShapeError(
            f"input shape {z.shape} does not match PCA rank {t.components.shape[1]}"
        )
    return z @ t.components.T + t.mean


def pca_apply(t: PcaTransform, data: Dataset) -> Dataset:
    """Project a dataset; image geometry does not survive projection."""
    return Dataset(pca_transform(t, data.features), data.labels.copy(),
                   image_shape=None, split_tag=data.split_tag)


def synth_blobs(classes: int, per_class: int, dims: int, separation: float,
                stream: RngStream) -> Dataset:
    """Isotropic unit-variance Gaussian clusters with separated centers.

    Centers are drawn so every pair sits at least ``separation`` cluster
    standard deviations apart; the proposal scale hugs that minimum so
    small separations give genuinely overlapping classes.
    """
    if classes < 1 or per_class < 1 or dims < 1:
        raise ConfigError("classes, per_class and dims must be positive")
    if separation < 0:
        raise DomainError(f"separation must be >= 0, got {separation}")
    center_stream = stream.substream(0)
    sample_stream = stream.substream(1)

    scale = max(separation, 1e-3) * 1.15 / np.sqrt(2.0 * dims)
    centers = []
    attempts = 0
    while len(centers) < classes:
        candidate = center_stream.gaussian(dims, 0.0, scale)
        ok = all(np.linalg.norm(candidate - c) >= separation for c in centers)
        if ok:
            centers.append(candidate)
            attempts = 0
        else:
            attempts += 1
            if attempts >= 1000:
                # centers will not fit at this scale; spread the proposals
                scale *= 1.5
                attempts = 0
    features = np.empty((classes * per_class, dims))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c, center in enumerate(centers):
        noise = sample_stream.substream(c).gaussian(per_class * dims, 0.0, 1.0)
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = center + noise.reshape(per_class, dims)
        labels[block] = c
    return Dataset(features, labels).validate()
