"""Datasets, Non-IID partitioning across clients, and aggregation weights."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import (
    ConfigurationError,
    DataError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    PartitionError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MAX_PARTITION_RETRIES = 100


@dataclass
class Dataset:
    """Feature matrix plus class labels; every class must be present."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DataError("features must be (N, d) and labels (N,)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.features.shape[0]} samples but {self.labels.shape[0]} labels"
            )
        if self.features.shape[0] < 1:
            raise DataError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        present = np.unique(self.labels)
        if present.size != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
            raise DataError(f"classes missing from the dataset: {missing}")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ClientShard:
    """One client's slice of the parent dataset plus its aggregation weight."""

    client_id: int
    indices: np.ndarray
    weight: float = 0.0

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size == 0:
            raise PartitionError(f"client {self.client_id} received an empty shard")
        if np.unique(self.indices).size != self.indices.size:
            raise PartitionError(f"client {self.client_id} has duplicate sample indices")

    @property
    def size(self) -> int:
        return self.indices.size


@dataclass
class PartitionSpec:
    """Which partitioning scheme to run and with what parameters."""

    scheme: str
    num_clients: int
    seed: int
    alpha: float = 0.5
    label_quantity: int = 2

    def __post_init__(self):
        if self.scheme not in ("dirichlet", "lq"):
            raise ConfigurationError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        if self.scheme == "dirichlet" and self.alpha <= 0.0:
            raise ConfigurationError("dirichlet alpha must be > 0")
        if self.scheme == "lq" and self.label_quantity < 1:
            raise ConfigurationError("label quantity must be >= 1")


def gen_synthetic_blobs(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    spread: float,
    seed: int,
) -> Dataset:
    """Balanced Gaussian blobs, one seeded random center per class."""
    if num_classes < 1 or dim < 1 or samples_per_class < 1:
        raise ConfigurationError("num_classes, dim and samples_per_class must be >= 1")
    if spread <= 0.0:
        raise ConfigurationError("spread must be > 0")
    rng = seeding.stream(seed, seeding.TAG_BLOBS)
    centers = rng.normal(0.0, 1.0, size=(num_classes, dim))
    features = np.empty((num_classes * samples_per_class, dim))
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    for c in range(num_classes):
        lo = c * samples_per_class
        hi = lo + samples_per_class
        features[lo:hi] = centers[c] + spread * rng.normal(size=(samples_per_class, dim))
        labels[lo:hi] = c
    return Dataset(features, labels, num_classes)


def _read_be32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxTruncatedError(f"{path}: header ends before offset {offset + 4}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label file pair; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        raw = f.read()
    magic = _read_be32(raw, 0, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxMagicError(
            f"{images_path}: expected magic {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
        )
    count = _read_be32(raw, 4, images_path)
    rows = _read_be32(raw, 8, images_path)
    cols = _read_be32(raw, 12, images_path)
    payload = raw[16:]
    if len(payload) < count * rows * cols:
        raise IdxTruncatedError(
            f"{images_path}: payload holds {len(payload)} bytes, "
            f"expected {count * rows * cols}"
        )
    pixels = np.frombuffer(payload[: count * rows * cols], dtype=np.uint8)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0

    with open(labels_path, "rb") as f:
        raw = f.read()
    magic = _read_be32(raw, 0, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxMagicError(
            f"{labels_path}: expected magic {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"
        )
    label_count = _read_be32(raw, 4, labels_path)
    label_payload = raw[8:]
    if len(label_payload) < label_count:
        raise IdxTruncatedError(
            f"{labels_path}: payload holds {len(label_payload)} bytes, expected {label_count}"
        )
    labels = np.frombuffer(label_payload[:label_count], dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise IdxCountMismatchError(
            f"{images_path} holds {count} images but {labels_path} holds {label_count} labels"
        )
    return Dataset(features, labels, int(labels.max()) + 1)


def compute_weights(shards: list[ClientShard]) -> list[ClientShard]:
    """Set each shard's weight to its share of the total sample count."""
    if not shards:
        raise PartitionError("no shards to weight")
    total = sum(s.size for s in shards)
    for shard in shards:
        shard.weight = shard.size / total
    return shards


def partition_dirichlet(ds: Dataset, num_clients: int, alpha: float, seed: int) -> list[ClientShard]:
    """Per-class Dirichlet allocation of sample indices across clients.

    For each class a Dirichlet(alpha * 1_K) proportion vector is drawn and
    the class's shuffled indices are split at the cumulative proportions.
    Empty shards trigger a bounded reseeded retry.
    """
    if num_clients < 1:
        raise ConfigurationError("num_clients must be >= 1")
    if alpha <= 0.0:
        raise ConfigurationError("alpha must be > 0")
    for attempt in range(MAX_PARTITION_RETRIES):
        rng = seeding.stream(seed, seeding.TAG_DIRICHLET, attempt)
        parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in range(ds.num_classes):
            class_idx = np.flatnonzero(ds.labels == c)
            proportions = rng.dirichlet(alpha * np.ones(num_clients))
            cuts = (np.cumsum(proportions)[:-1] * class_idx.size).astype(int)
            shuffled = rng.permutation(class_idx)
            for k, chunk in enumerate(np.split(shuffled, cuts)):
                parts[k].append(chunk)
        sizes = [sum(c.size for c in p) for p in parts]
        if min(sizes) > 0:
            shards = [
                ClientShard(k, np.sort(np.concatenate(parts[k]))) for k in range(num_clients)
            ]
            return compute_weights(shards)
    raise PartitionError(
        f"could not produce {num_clients} non-empty shards after "
        f"{MAX_PARTITION_RETRIES} reseeded attempts"
    )


def partition_label_quantity(ds: Dataset, num_clients: int, q: int, seed: int) -> list[ClientShard]:
    """Label-quantity split: each client holds samples from at most q classes.

    Classes are dealt round-robin over one seeded shuffle (client k takes
    positions k*q .. k*q+q-1 modulo C), which covers every class when
    K*q >= C. Each class's index list is then split evenly among its
    holders, remainder samples going to the earliest holders.
    """
    c_total = ds.num_classes
    if not 1 <= q <= c_total:
        raise ConfigurationError(f"label quantity must lie in [1, {c_total}], got {q}")
    if num_clients * q < c_total:
        raise ConfigurationError(
            f"{num_clients} clients with {q} classes each cannot cover {c_total} classes"
        )
    rng = seeding.stream(seed, seeding.TAG_LABEL_QTY)
    order = rng.permutation(c_total)
    holders: dict[int, list[int]] = {c: [] for c in range(c_total)}
    for k in range(num_clients):
        for j in range(q):
            holders[int(order[(k * q + j) % c_total])].append(k)
    if any(not h for h in holders.values()):
        raise PartitionError("a class was left without any assigned client")

    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(c_total):
        class_idx = np.flatnonzero(ds.labels == c)
        assigned = holders[c]
        base, rem = divmod(class_idx.size, len(assigned))
        offset = 0
        for rank, k in enumerate(assigned):
            take = base + (1 if rank < rem else 0)
            if take:
                parts[k].append(class_idx[offset : offset + take])
            offset += take
    shards = []
    for k in range(num_clients):
        if not parts[k]:
            raise PartitionError(f"client {k} received no samples from its classes")
        shards.append(ClientShard(k, np.sort(np.concatenate(parts[k]))))
    return compute_weights(shards)


def partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    if spec.scheme == "dirichlet":
        return partition_dirichlet(ds, spec.num_clients, spec.alpha, spec.seed)
    return partition_label_quantity(ds, spec.num_clients, spec.label_quantity, spec.seed)


def split_train_test(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified held-out split; the test set is disjoint from all shards."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError("test fraction must lie in (0, 1)")
    rng = seeding.stream(seed, seeding.TAG_SPLIT)
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        class_idx = rng.permutation(np.flatnonzero(ds.labels == c))
        n_test = max(1, int(round(test_fraction * class_idx.size)))
        if n_test >= class_idx.size:
            raise ConfigurationError(f"class {c} too small for a {test_fraction} test split")
        test_idx.append(class_idx[:n_test])
        train_idx.append(class_idx[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return (
        Dataset(ds.features[train], ds.labels[train], ds.num_classes),
        Dataset(ds.features[test], ds.labels[test], ds.num_classes),
    )
