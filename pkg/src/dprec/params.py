"""Flat parameter vectors, group partitions, tiny models, and datasets.

Models are deliberately small (multinomial logistic regression and a
one-hidden-layer tanh MLP): the communication mechanism under study is
model-agnostic, and small dense models keep every experiment exactly
reproducible in float64 on a single machine.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, ShapeMismatchError, TrainingDivergedError
from .rng import (
    TAG_DATA,
    TAG_MODEL_INIT,
    TAG_SHUFFLE,
    GaussianStream,
    StreamKey,
    make_stream_id,
)


@dataclass(frozen=True)
class Group:
    """One named contiguous slice of a flat parameter vector."""

    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.stop)


@dataclass(frozen=True)
class GroupPartition:
    """An ordered list of groups tiling ``[0, total_length)``.

    The listing order is the canonical (declaration) order and determines
    message index order; the groups must tile the vector exactly when
    sorted by offset, but may be listed in any order.
    """

    groups: tuple[Group, ...]

    def __post_init__(self) -> None:
        if not self.groups:
            raise InvalidConfigError("partition needs at least one group")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise InvalidConfigError(f"duplicate group names in {names}")
        cover = sorted(self.groups, key=lambda g: g.offset)
        pos = 0
        for g in cover:
            if g.length < 1:
                raise InvalidConfigError(f"group {g.name!r} has length {g.length}")
            if g.offset != pos:
                raise InvalidConfigError(
                    f"groups do not tile the vector: gap/overlap at offset {g.offset}"
                )
            pos = g.stop

    @classmethod
    def from_sizes(cls, sizes: list[tuple[str, int]]) -> "GroupPartition":
        groups = []
        offset = 0
        for name, length in sizes:
            groups.append(Group(name, offset, length))
            offset += length
        return cls(tuple(groups))

    @classmethod
    def single(cls, length: int, name: str = "all") -> "GroupPartition":
        return cls.from_sizes([(name, length)])

    @property
    def total_length(self) -> int:
        return sum(g.length for g in self.groups)

    def __len__(self) -> int:
        return len(self.groups)


@dataclass
class ParamVector:
    """A flat float64 parameter (or update) vector with a group partition."""

    values: np.ndarray
    partition: GroupPartition

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeMismatchError(f"expected 1-D values, got shape {self.values.shape}")
        if len(self.values) != self.partition.total_length:
            raise ShapeMismatchError(
                f"vector length {len(self.values)} != partition total "
                f"{self.partition.total_length}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidConfigError("parameter vector contains non-finite entries")

    def group_values(self, index: int) -> np.ndarray:
        return self.values[self.partition.groups[index].slice]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.partition)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_same_partition(other)
        return ParamVector(self.values + other.values, self.partition)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_same_partition(other)
        return ParamVector(self.values - other.values, self.partition)

    def _check_same_partition(self, other: "ParamVector") -> None:
        if self.partition != other.partition:
            raise ShapeMismatchError("partitions differ")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.partition == other.partition and np.array_equal(self.values, other.values)


@dataclass
class LocalDataset:
    """One client's data shard: feature matrix plus integer labels.

    Zero-row shards are legal (extreme non-i.i.d. splits can produce
    them); training on one is a no-op.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int = 0

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeMismatchError(f"features must be 2-D, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeMismatchError("labels length must match feature rows")
        if not np.all(np.isfinite(self.features)):
            raise InvalidConfigError("features contain non-finite entries")
        if self.num_classes <= 0:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidConfigError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: kind, dimensions, hidden width."""

    kind: str  # "logreg" | "mlp"
    feature_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("logreg", "mlp"):
            raise InvalidConfigError(f"unknown model kind {self.kind!r}")
        if self.feature_dim < 1 or self.num_classes < 2:
            raise InvalidConfigError("feature_dim >= 1 and num_classes >= 2 required")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise InvalidConfigError("mlp needs hidden_dim >= 1")

    def partition(self) -> GroupPartition:
        d, c, h = self.feature_dim, self.num_classes, self.hidden_dim
        if self.kind == "logreg":
            return GroupPartition.from_sizes([("w", d * c), ("b", c)])
        return GroupPartition.from_sizes(
            [("w0", d * h), ("b0", h), ("w1", h * c), ("b1", c)]
        )


@dataclass
class Model:
    """A tiny classifier over a flat weight vector."""

    spec: ModelSpec
    weights: ParamVector

    def __post_init__(self) -> None:
        if self.weights.partition != self.spec.partition():
            raise ShapeMismatchError("weights partition does not match architecture")

    @classmethod
    def init(cls, spec: ModelSpec, seed: int, scale: float = 0.01) -> "Model":
        """Deterministic initialization: all weights scale * N(0, 1)."""
        part = spec.partition()
        key = StreamKey(seed, make_stream_id(0, TAG_MODEL_INIT))
        values = scale * GaussianStream(key).normals(part.total_length)
        return cls(spec, ParamVector(values, part))

    def copy(self) -> "Model":
        return Model(self.spec, self.weights.copy())

    def _unpack(self) -> tuple[np.ndarray, ...]:
        v = self.weights
        d, c, h = self.spec.feature_dim, self.spec.num_classes, self.spec.hidden_dim
        if self.spec.kind == "logreg":
            return v.group_values(0).reshape(d, c), v.group_values(1)
        return (
            v.group_values(0).reshape(d, h),
            v.group_values(1),
            v.group_values(2).reshape(h, c),
            v.group_values(3),
        )

    def logits(self, features: np.ndarray) -> np.ndarray:
        if self.spec.kind == "logreg":
            w, b = self._unpack()
            return features @ w + b
        w0, b0, w1, b1 = self._unpack()
        return np.tanh(features @ w0 + b0) @ w1 + b1

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)

    def accuracy(self, data: LocalDataset) -> float:
        if len(data) == 0:
            return 0.0
        return float(np.mean(self.predict(data.features) == data.labels))

    def loss(self, features: np.ndarray, labels: np.ndarray) -> float:
        z = self.logits(features)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(len(labels)), labels].mean())

    def loss_and_grad(self, features: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean cross-entropy and its gradient as a flat vector."""
        n = len(labels)
        if self.spec.kind == "logreg":
            w, b = self._unpack()
            z = features @ w + b
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            p = e / e.sum(axis=1, keepdims=True)
            loss = float(-np.log(p[np.arange(n), labels]).mean())
            p[np.arange(n), labels] -= 1.0
            p /= n
            grad = np.concatenate([(features.T @ p).ravel(), p.sum(axis=0)])
            return loss, grad
        w0, b0, w1, b1 = self._unpack()
        a = np.tanh(features @ w0 + b0)
        z = a @ w1 + b1
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        loss = float(-np.log(p[np.arange(n), labels]).mean())
        p[np.arange(n), labels] -= 1.0
        p /= n
        da = (p @ w1.T) * (1.0 - a * a)
        grad = np.concatenate(
            [
                (features.T @ da).ravel(),
                da.sum(axis=0),
                (a.T @ p).ravel(),
                p.sum(axis=0),
            ]
        )
        return loss, grad


def model_delta(trained: Model, base: Model) -> ParamVector:
    """Element-wise weight difference ``trained - base``."""
    if trained.spec != base.spec:
        raise ShapeMismatchError("model architectures differ")
    return trained.weights - base.weights


def local_train(
    model: Model,
    data: LocalDataset,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> Model:
    """Mini-batch SGD on cross-entropy; returns a new model.

    Shuffling order is fixed by ``seed`` (one permutation per epoch), so
    the result is a pure function of its arguments. The final partial
    batch is included.
    """
    if epochs < 0:
        raise InvalidConfigError("epochs must be nonnegative")
    if batch_size < 1:
        raise InvalidConfigError("batch_size must be >= 1")
    out = model.copy()
    n = len(data)
    if n == 0 or epochs == 0:
        return out
    for epoch in range(epochs):
        stream = GaussianStream(StreamKey(seed, make_stream_id(epoch, TAG_SHUFFLE)))
        order = stream.shuffled_indices(n)
        for b0 in range(0, n, batch_size):
            idx = order[b0 : b0 + batch_size]
            loss, grad = out.loss_and_grad(data.features[idx], data.labels[idx])
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDivergedError(
                    f"non-finite loss/gradient at epoch {epoch}, batch offset {b0}"
                )
            out.weights.values -= lr * grad
    return out


def _dirichlet(stream: GaussianStream, concentration: float, size: int) -> np.ndarray:
    """Symmetric Dirichlet draw via Marsaglia-Tsang gamma variates."""
    g = np.array([_gamma_variate(stream, concentration) for _ in range(size)])
    total = g.sum()
    if total <= 0.0:  # all-zero underflow at tiny concentration
        g[:] = 1.0
        total = float(size)
    return g / total


def _gamma_variate(stream: GaussianStream, shape: float) -> float:
    if shape < 1.0:
        # Boost: Gamma(a) = Gamma(a+1) * U^(1/a)
        u = stream.uniform()
        return _gamma_variate(stream, shape + 1.0) * u ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = stream.normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = stream.uniform()
        if u < 1.0 - 0.0331 * x**4:
            return d * v
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def dirichlet_partition(
    dataset: LocalDataset, n_clients: int, concentration: float, seed: int
) -> list[LocalDataset]:
    """Split a dataset into non-i.i.d. client shards.

    Per class, client proportions are drawn from a symmetric Dirichlet
    and realized on the shuffled class indices with floor quotas;
    remainder examples go to the clients with the largest residual quota
    (ties broken by client index). The shards are disjoint and their
    union is the input.
    """
    if n_clients < 1:
        raise InvalidConfigError("n_clients must be >= 1")
    if n_clients > len(dataset):
        raise InvalidConfigError(
            f"cannot split {len(dataset)} examples across {n_clients} clients"
        )
    if concentration <= 0:
        raise InvalidConfigError("concentration must be positive")
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    if np.any(counts == 0):
        raise InvalidConfigError("every class needs at least one example")

    stream = GaussianStream(StreamKey(seed, make_stream_id(0, TAG_DATA)))
    assigned: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        idx = idx[stream.shuffled_indices(len(idx))]
        if n_clients == 1:
            assigned[0].append(idx)
            continue
        props = _dirichlet(stream, concentration, n_clients)
        quota = props * len(idx)
        base = np.floor(quota).astype(np.int64)
        residual = quota - base
        remainder = len(idx) - int(base.sum())
        order = np.lexsort((np.arange(n_clients), -residual))
        base[order[:remainder]] += 1
        stops = np.cumsum(base)
        starts = stops - base
        for client in range(n_clients):
            assigned[client].append(idx[starts[client] : stops[client]])
    shards = []
    for client in range(n_clients):
        rows = np.concatenate(assigned[client]) if assigned[client] else np.empty(0, np.int64)
        shards.append(
            LocalDataset(
                dataset.features[rows], dataset.labels[rows], num_classes=dataset.num_classes
            )
        )
    return shards


def synthetic_classification(
    n_examples: int,
    feature_dim: int,
    num_classes: int,
    seed: int,
    class_sep: float = 3.0,
    task_seed: int | None = None,
) -> LocalDataset:
    """Seeded Gaussian-blob classification data, self-contained.

    Class means are ``class_sep`` times random unit directions drawn from
    ``task_seed`` (default: ``seed``), so train and test splits of one
    task share means while drawing disjoint example noise from ``seed``.
    Labels cycle round-robin so classes stay balanced.
    """
    if n_examples < num_classes:
        raise InvalidConfigError("need at least one example per class")
    task = GaussianStream(
        StreamKey(seed if task_seed is None else task_seed, make_stream_id(1, TAG_DATA))
    )
    means = task.normals(num_classes * feature_dim).reshape(num_classes, feature_dim)
    means *= class_sep / np.linalg.norm(means, axis=1, keepdims=True)
    stream = GaussianStream(StreamKey(seed, make_stream_id(2, TAG_DATA)))
    labels = np.arange(n_examples, dtype=np.int64) % num_classes
    noise = stream.normals(n_examples * feature_dim).reshape(n_examples, feature_dim)
    return LocalDataset(means[labels] + noise, labels, num_classes=num_classes)


def save_dataset_csv(path: str, dataset: LocalDataset) -> None:
    """Write ``label,f0,f1,...`` rows (repr floats, round-trip exact)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def load_dataset_csv(path: str, num_classes: int = 0) -> LocalDataset:
    """Read a ``label,f0,f1,...`` CSV written by :func:`save_dataset_csv`."""
    labels = []
    rows = []
    with open(path, newline="") as fh:
        for line_no, rec in enumerate(csv.reader(fh)):
            if not rec:
                continue
            try:
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise InvalidConfigError(f"{path}:{line_no + 1}: {exc}") from exc
    if not rows:
        raise InvalidConfigError(f"{path}: empty dataset")
    return LocalDataset(np.array(rows), np.array(labels), num_classes=num_classes)


def save_dataset_npz(path: str, dataset: LocalDataset) -> None:
    np.savez(path, features=dataset.features, labels=dataset.labels)


def load_dataset_npz(path: str, num_classes: int = 0) -> LocalDataset:
    with np.load(path) as data:
        return LocalDataset(data["features"], data["labels"], num_classes=num_classes)
