"""Datasets, Non-IID client partitioning and label-noise injection."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import FormatError, PartitionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MAX_DIRICHLET_RESAMPLES = 100


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample")
        if labels.shape != (samples.shape[0],):
            raise ValueError(f"{samples.shape[0]} samples but labels have shape {labels.shape}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        samples.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[indices], self.labels[indices], self.num_classes)

    def with_labels(self, labels: np.ndarray) -> Dataset:
        return Dataset(self.samples, labels, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class ClientPartition:
    client_id: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64)
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class PartitionSpec:
    scheme: Literal["dirichlet", "shards"]
    n_clients: int
    dirichlet_alpha: float = 0.5
    shards_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("dirichlet", "shards"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not self.dirichlet_alpha > 0:
            raise ValueError("dirichlet_alpha must be > 0")
        if self.shards_per_client < 1:
            raise ValueError("shards_per_client must be >= 1")


# ---------------------------------------------------------------------------
# loading / generation


def _read_idx(path: str | Path, magic: int) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = math.prod(dims)
    if len(raw) - header < need:
        raise FormatError(f"{path}: truncated payload, need {need} bytes", len(raw))
    if len(raw) - header > need:
        raise FormatError(f"{path}: {len(raw) - header - need} trailing bytes", header + need)
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)
    return data, header


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST / Fashion-MNIST layout).

    Pixels are scaled to [0, 1]. ``num_classes`` defaults to ``max(label) + 1``.
    """
    images, _ = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels, label_header = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    if images.shape[0] == 0:
        raise FormatError(f"{images_path}: no images", 4)
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    elif labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"{labels_path}: label {labels[bad]} >= {num_classes}", label_header + bad)
    return Dataset(images.astype(np.float32) / 255.0, labels, num_classes)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (inverse of the reader)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def synth_gaussian_mixture(n_classes: int, n_per_class: int, dim: int, spread: float,
                           seed: int, mean_scale: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs, one per class, at seeded means ~ N(0, mean_scale^2 I).

    Samples are returned in a seeded random order.
    """
    if min(n_classes, n_per_class, dim) < 1:
        raise ValueError("n_classes, n_per_class and dim must all be >= 1")
    if not spread > 0:
        raise ValueError("spread must be > 0")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, mean_scale, size=(n_classes, dim))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = means[labels] + spread * rng.normal(size=(labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(x[order].astype(np.float32), labels[order], n_classes)


# ---------------------------------------------------------------------------
# partitioning


def _check_feasible(dataset: Dataset, needed: int, what: str) -> None:
    if len(dataset) < needed:
        raise PartitionError(f"{len(dataset)} samples cannot be split into {what}")


def partition_dirichlet(dataset: Dataset, spec: PartitionSpec) -> list[ClientPartition]:
    """Per-class Dir(alpha) label skew.

    Each class's shuffled indices are cut contiguously in the sampled proportions.
    """
    if spec.scheme != "dirichlet":
        raise ValueError("spec.scheme must be 'dirichlet'")
    n = spec.n_clients
    _check_feasible(dataset, n, f"{n} non-empty clients")
    rng = np.random.default_rng(spec.seed)
    by_class = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(dataset.num_classes)]

    def draw() -> list[list[np.ndarray]]:
        owned: list[list[np.ndarray]] = [[] for _ in range(n)]
        for idx in by_class:
            if idx.size == 0:
                continue
            p = rng.dirichlet(np.full(n, spec.dirichlet_alpha))
            exact = p * idx.size
            counts = np.floor(exact).astype(np.int64)
            residue = idx.size - counts.sum()
            counts[np.argmax(exact - counts)] += residue
            cuts = np.cumsum(counts)[:-1]
            for client, part in enumerate(np.split(idx, cuts)):
                owned[client].append(part)
        return owned

    for _ in range(MAX_DIRICHLET_RESAMPLES):
        owned = draw()
        sizes = [sum(a.size for a in parts) for parts in owned]
        if min(sizes) > 0:
            break
    clients = [np.concatenate(parts) if parts else np.empty(0, np.int64) for parts in owned]
    # still some empty clients: donate single samples from the largest ones
    for i in range(n):
        if clients[i].size == 0:
            donor = int(np.argmax([c.size for c in clients]))
            clients[i] = clients[donor][-1:]
            clients[donor] = clients[donor][:-1]
    return [ClientPartition(i, np.sort(c)) for i, c in enumerate(clients)]


def partition_shards(dataset: Dataset, spec: PartitionSpec) -> list[ClientPartition]:
    """Label-sorted shards, ``shards_per_client`` random shards per client."""
    if spec.scheme != "shards":
        raise ValueError("spec.scheme must be 'shards'")
    n_shards = spec.n_clients * spec.shards_per_client
    _check_feasible(dataset, n_shards, f"{n_shards} shards")
    order = np.argsort(dataset.labels, kind="stable")
    size = len(dataset) // n_shards
    shards = [order[i * size:(i + 1) * size] for i in range(n_shards - 1)]
    shards.append(order[(n_shards - 1) * size:])
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n_shards)
    k = spec.shards_per_client
    return [
        ClientPartition(c, np.sort(np.concatenate([shards[s] for s in perm[c * k:(c + 1) * k]])))
        for c in range(spec.n_clients)
    ]


def partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientPartition]:
    if spec.scheme == "dirichlet":
        return partition_dirichlet(dataset, spec)
    return partition_shards(dataset, spec)


def inject_label_noise(dataset: Dataset, ratio: float, seed: int) -> Dataset:
    """Symmetric noise: floor(ratio * S) random samples get a random *other* class."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("noise ratio must lie in [0, 1]")
    s = len(dataset)
    # tolerate float error such as 0.29 * 100 = 28.999...
    k = math.floor(ratio * s + 1e-9)
    if k == 0:
        return dataset
    if dataset.num_classes < 2:
        raise ValueError("label noise needs at least two classes")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(s, size=k, replace=False)
    labels = dataset.labels.copy()
    labels[chosen] = (labels[chosen] + rng.integers(1, dataset.num_classes, size=k)) % dataset.num_classes
    return dataset.with_labels(labels)


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    """Shannon entropy (nats) of the empirical label distribution."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
