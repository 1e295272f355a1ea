"""Datasets, client partitions and symbol counting."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .channel import noise_variance_from_snr, perturb
from .exceptions import ConfigurationError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    input_shape: tuple[int, int]
    label_symbols: int = 1

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ConfigurationError("dataset needs a non-empty 2-D input matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ConfigurationError("one label per input row required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigurationError(f"labels must lie in [0, {self.n_classes})")
        if self.input_shape[0] * self.input_shape[1] != self.inputs.shape[1]:
            raise ConfigurationError("input_shape does not match the input width")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def symbols_per_sample(self) -> int:
        return self.input_shape[0] * self.input_shape[1] + self.label_symbols

    def targets(self, indices=None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[indices]
        out = np.zeros((labels.shape[0], self.n_classes))
        out[np.arange(labels.shape[0]), labels] = 1.0
        return out

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, inputs=self.inputs[indices], labels=self.labels[indices])


@dataclass(frozen=True)
class Partition:
    assignments: list[np.ndarray]
    mode: str = "iid"
    labels_per_client: int | None = None
    client_labels: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


def synth_classification(n: int, classes: int, dim: int, seed: int, mean_norm: float = 3.0,
                         means_seed: int | None = None) -> Dataset:
    """Balanced Gaussian clusters with unit-variance noise.

    Class means are random directions scaled to ``mean_norm``. They depend on
    ``means_seed`` (defaults to ``seed``), so a held-out set drawn with a
    different ``seed`` but the same ``means_seed`` shares the clusters.
    """
    if n < classes:
        raise ConfigurationError("need at least one sample per class")
    if dim < classes:
        raise ConfigurationError("dim must be >= classes")
    means_rng = np.random.default_rng([int(means_seed if means_seed is not None else seed), 0])
    means = means_rng.normal(size=(classes, dim))
    means *= mean_norm / np.linalg.norm(means, axis=1, keepdims=True)
    rng = np.random.default_rng([int(seed), 1])
    labels = rng.permutation(np.arange(n) % classes)
    inputs = means[labels] + rng.normal(size=(n, dim))
    return Dataset(inputs=inputs, labels=labels.astype(np.int64), n_classes=classes,
                   input_shape=(1, dim), label_symbols=1)


def _read_exact(fh, n: int, offset: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated {what}: expected {n} bytes at offset {offset}, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Read an IDX image/label file pair (the MNIST container)."""
    if not images_path or not labels_path:
        raise FileNotFoundError("IDX paths must be non-empty")
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, 0, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(f"bad image magic 0x{magic:08x} at offset 0")
        pixels = _read_exact(fh, count * rows * cols, 16, "image data")
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, 0, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(f"bad label magic 0x{magic:08x} at offset 0")
        raw_labels = _read_exact(fh, n_labels, 8, "label data")
    if n_labels != count:
        raise DataFormatError(f"label count {n_labels} at offset 4 does not match image count {count}")
    inputs = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return Dataset(inputs=inputs, labels=labels, n_classes=n_classes,
                   input_shape=(rows, cols), label_symbols=1)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (count, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def partition(dataset: Dataset, k: int, mode: str = "iid", seed: int = 0,
              labels_per_client: int | None = None) -> Partition:
    """Split sample indices across ``k`` clients.

    ``iid`` shuffles and cuts into near-equal parts. ``noniid`` sorts by
    label and hands each client ``labels_per_client`` distinct labels (a
    uniform draw from {1, 2} per client when None); every label's samples
    are divided evenly among the clients that hold it.
    """
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    n = len(dataset)
    if n < k:
        raise ConfigurationError(f"cannot give {k} clients a sample each from {n} samples")
    rng = np.random.default_rng([int(seed), 2])
    if mode == "iid":
        parts = np.array_split(rng.permutation(n), k)
        return Partition([np.sort(p) for p in parts], mode="iid")
    if mode != "noniid":
        raise ConfigurationError(f"partition mode must be 'iid' or 'noniid', got {mode!r}")

    C = dataset.n_classes
    if labels_per_client is None:
        counts = rng.integers(1, 3, size=k)
    else:
        if not 1 <= labels_per_client <= C:
            raise ConfigurationError(f"labels_per_client must be in [1, {C}]")
        counts = np.full(k, int(labels_per_client))
    present = np.unique(dataset.labels)
    if counts.sum() < present.size:
        raise ConfigurationError(
            f"{k} clients holding {counts.tolist()} labels cannot cover {present.size} labels"
        )
    # consecutive label slots (mod number of labels) keep each client's labels distinct
    order = rng.permutation(present)
    client_labels = []
    slot = 0
    for c in counts:
        c = min(int(c), present.size)
        client_labels.append(tuple(int(order[(slot + j) % present.size]) for j in range(c)))
        slot += c
    holders: dict[int, list[int]] = {int(lab): [] for lab in present}
    for client, labs in enumerate(client_labels):
        for lab in labs:
            holders[lab].append(client)
    assignments: list[list[np.ndarray]] = [[] for _ in range(k)]
    for lab, clients in holders.items():
        idx = np.flatnonzero(dataset.labels == lab)
        idx = rng.permutation(idx)
        if len(clients) > idx.size:
            raise ConfigurationError(f"label {lab} has {idx.size} samples for {len(clients)} clients")
        for client, shard in zip(clients, np.array_split(idx, len(clients))):
            assignments[client].append(shard)
    out = [np.sort(np.concatenate(a)) for a in assignments]
    return Partition(out, mode="noniid", labels_per_client=labels_per_client, client_labels=client_labels)


def dataset_symbols(dataset: Dataset, indices: Sequence[int]) -> int:
    """Symbols needed to ship the given samples: ``n * (UxVx + UyVy)``."""
    count = len(indices)
    if count < 1:
        raise ConfigurationError("dataset_symbols needs a non-empty index list")
    return count * dataset.symbols_per_sample


def add_dataset_noise(dataset: Dataset, snr_db: float | None, rng: np.random.Generator,
                      per_element: bool = True) -> Dataset:
    """AWGN on the inputs only, at the given SNR of the input matrix.

    The variance is ``|X|_F^2 * 10^(-snr/20)``; with ``per_element=False``
    that amount is spread over all entries of X.
    """
    if snr_db is None or snr_db == math.inf:
        return dataset
    if not math.isfinite(snr_db):
        raise ConfigurationError(f"snr_db must be finite or +inf, got {snr_db}")
    flat = dataset.inputs.ravel()
    var = noise_variance_from_snr(flat, snr_db)
    if not per_element:
        var /= flat.size
    noisy = perturb(flat, var, rng).reshape(dataset.inputs.shape)
    return replace(dataset, inputs=noisy)


def split_holdout(dataset: Dataset, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    """Random train/test split."""
    if not 0 < n_test < len(dataset):
        raise ConfigurationError("n_test must be between 1 and len(dataset) - 1")
    perm = np.random.default_rng([int(seed), 3]).permutation(len(dataset))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def mnist_symbol_count(n_samples: int = 60_000) -> int:
    return n_samples * (28 * 28 + 1)
