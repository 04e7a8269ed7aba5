"""Class-incremental task streams with strict single-pass iteration.

Also holds the binary dataset container (``RWFD``) and the JSON partition
sidecar. Layout of a dataset file, all little-endian::

    b"RWFD" | version u32 | count u32 | L_in u32 | input_dim u32 | classes u32
    count x ( label u32 | L_in*input_dim float32 )
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List

import numpy as np

from .numerics import RngStream

DATASET_MAGIC = b"RWFD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4s5I")


class SinglePassError(RuntimeError):
    """A training sample was requested a second time."""


@dataclass
class StreamConfig:
    T: int = 5
    classes_per_task: int = 4
    samples_per_class: int = 100
    few_shot_fraction: float = 1.0
    L_in: int = 8
    input_dim: int = 16
    class_geometry: str = "subspace_clusters"
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.classes_per_task < 1 or self.samples_per_class < 2:
            raise ValueError("T, classes_per_task must be >= 1 and samples_per_class >= 2")
        if not 0 < self.few_shot_fraction <= 1:
            raise ValueError("few_shot_fraction must lie in (0, 1]")
        if self.L_in < 1 or self.input_dim < 2:
            raise ValueError("L_in >= 1 and input_dim >= 2 required")
        if self.class_geometry != "subspace_clusters":
            raise ValueError(f"unknown class_geometry {self.class_geometry!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def num_classes(self):
        return self.T * self.classes_per_task

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown stream config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Dataset:
    """Labeled samples: ``x`` is (N, L_in, input_dim), ``y`` is (N,)."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.y)


@dataclass
class Task:
    classes: List[int]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    consumed: np.ndarray = None

    def __post_init__(self):
        if self.consumed is None:
            self.consumed = np.zeros(len(self.train_y), dtype=bool)


@dataclass
class TaskStream:
    tasks: List[Task]
    num_classes: int
    served: int = 0  # training samples handed out so far
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for t in self.tasks:
            cs = set(t.classes)
            if cs & seen:
                raise ValueError("task class sets must be disjoint")
            seen |= cs
            if len(t.train_y) and not np.isin(t.train_y, t.classes).all():
                raise ValueError("train label outside its task's class set")

    @property
    def T(self):
        return len(self.tasks)

    def seen_classes(self, t):
        """Sorted class ids of tasks 0..t (0-based)."""
        return sorted(c for task in self.tasks[: t + 1] for c in task.classes)

    def total_train(self):
        return sum(len(t.train_y) for t in self.tasks)

    def partition(self):
        return [list(map(int, t.classes)) for t in self.tasks]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synthetic_dataset(n_classes, samples_per_class, L_in, input_dim, noise_std, rng: RngStream):
    """Subspace-cluster classes.

    Class ``c`` owns a random orthonormal pair ``U_c`` in input space and a
    fixed coefficient pattern ``a_c`` (one 2-vector per token). A sample is
    ``token_j = U_c (a_cj + noise_std * xi_j) + noise_std * eps_j``: in-plane
    jitter plus isotropic noise, so ``noise_std = 0`` gives identical samples.
    """
    xs, ys = [], []
    for c in range(n_classes):
        crng = rng.child(c)
        U, _ = np.linalg.qr(crng.child(0).normal((input_dim, 2)))
        coef = crng.child(1).normal((L_in, 2)) * np.sqrt(input_dim / 2.0)
        jitter = crng.child(2).normal((samples_per_class, L_in, 2), noise_std)
        noise = crng.child(3).normal((samples_per_class, L_in, input_dim), noise_std)
        xs.append((coef[None] + jitter) @ U.T + noise)
        ys.append(np.full(samples_per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys), n_classes)


def make_synthetic_stream(config: StreamConfig) -> TaskStream:
    rng = RngStream(config.seed)
    data = synthetic_dataset(
        config.num_classes, config.samples_per_class, config.L_in, config.input_dim,
        config.noise_std, rng.child(0),
    )
    stream = split_tasks(data, config.T, config.seed)
    if config.few_shot_fraction < 1:
        stream = subsample_fraction(stream, config.few_shot_fraction, config.seed)
    stream.meta["config"] = config.to_dict()
    return stream


def make_base_dataset(config: StreamConfig, n_classes, samples_per_class, seed):
    """Held-out classes for backbone pretraining; geometry independent of the stream."""
    return synthetic_dataset(
        n_classes, samples_per_class, config.L_in, config.input_dim, config.noise_std,
        RngStream(seed).child(1),
    )


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


def split_tasks(data: Dataset, T, seed, train_fraction=0.8) -> TaskStream:
    """Shuffle classes by seed into T equal groups; split each class 80/20."""
    C = data.num_classes
    if T < 1 or C % T:
        raise ValueError(f"{C} classes cannot be split into {T} equal tasks")
    rng = RngStream(seed).child(2)
    order = rng.child(0).permutation(C)
    per = C // T
    tasks = []
    for t in range(T):
        classes = sorted(int(c) for c in order[t * per : (t + 1) * per])
        tr, te = [], []
        for c in classes:
            idx = np.flatnonzero(data.y == c)
            idx = idx[rng.child(1, c).permutation(len(idx))]
            n_train = int(round(train_fraction * len(idx)))
            tr.append(idx[:n_train])
            te.append(idx[n_train:])
        tr = np.concatenate(tr) if tr else np.zeros(0, dtype=np.int64)
        te = np.concatenate(te) if te else np.zeros(0, dtype=np.int64)
        tasks.append(Task(classes, data.x[tr], data.y[tr], data.x[te], data.y[te]))
    return TaskStream(tasks, C)


def subsample_fraction(stream: TaskStream, fraction, seed) -> TaskStream:
    """Keep ceil(fraction * n) train samples per class (nested across fractions)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    rng = RngStream(seed).child(3)
    tasks = []
    for task in stream.tasks:
        if task.consumed.any():
            raise SinglePassError("cannot subsample a task that was already consumed")
        keep = []
        for c in task.classes:
            idx = np.flatnonzero(task.train_y == c)
            order = idx[rng.child(c).permutation(len(idx))]
            keep.append(np.sort(order[: math.ceil(fraction * len(idx))]))
        keep = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)
        tasks.append(
            Task(list(task.classes), task.train_x[keep], task.train_y[keep],
                 task.test_x, task.test_y)
        )
    return TaskStream(tasks, stream.num_classes, meta=dict(stream.meta))


# ---------------------------------------------------------------------------
# single-pass iteration
# ---------------------------------------------------------------------------


def _batches(stream, owners, x, y, batch_size, rng):
    order = rng.permutation(len(y))
    for s in range(0, len(order), batch_size):
        sel = order[s : s + batch_size]
        for task, local in owners(sel):
            if task.consumed[local].any():
                raise SinglePassError("sample served twice")
            task.consumed[local] = True
        stream.served += len(sel)
        yield x[sel], y[sel]


def iterate_single_pass(stream: TaskStream, task_index, batch_size, seed):
    """Seeded shuffle of one task's train set, in batches; each sample once."""
    task = stream.tasks[task_index]
    if task.consumed.any():
        raise SinglePassError(f"task {task_index} was already iterated")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = RngStream(seed).child(4, task_index)
    return _batches(
        stream, lambda sel: [(task, sel)], task.train_x, task.train_y, batch_size, rng
    )


def iterate_union_single_pass(stream: TaskStream, batch_size, seed):
    """One pass over the shuffled union of every task (the joint reference)."""
    if any(t.consumed.any() for t in stream.tasks):
        raise SinglePassError("stream was already partially iterated")
    x = np.concatenate([t.train_x for t in stream.tasks])
    y = np.concatenate([t.train_y for t in stream.tasks])
    bounds = np.cumsum([0] + [len(t.train_y) for t in stream.tasks])

    def owners(sel):
        out = []
        for i, task in enumerate(stream.tasks):
            hit = sel[(sel >= bounds[i]) & (sel < bounds[i + 1])]
            if len(hit):
                out.append((task, hit - bounds[i]))
        return out

    return _batches(stream, owners, x, y, batch_size, RngStream(seed).child(5))


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _record_dtype(L_in, input_dim):
    return np.dtype([("label", "<u4"), ("x", "<f4", (L_in, input_dim))])


def dataset_bytes(data: Dataset) -> bytes:
    n = len(data)
    L_in, dim = (data.x.shape[1], data.x.shape[2]) if data.x.ndim == 3 else (0, 0)
    rec = np.zeros(n, dtype=_record_dtype(L_in, dim))
    rec["label"] = data.y
    if n:
        rec["x"] = data.x
    return _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, L_in, dim, data.num_classes) + rec.tobytes()


def write_dataset(path, data: Dataset):
    Path(path).write_bytes(dataset_bytes(data))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, L_in, dim, n_classes = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dt = _record_dtype(L_in, dim)
    body = raw[_HEADER.size :]
    if len(body) != n * dt.itemsize:
        raise ValueError(f"{path}: expected {n} records, payload has {len(body)} bytes")
    rec = np.frombuffer(body, dtype=dt, count=n)
    y = rec["label"].astype(np.int64)
    if n and y.max() >= n_classes:
        raise ValueError(f"{path}: label out of range")
    x = rec["x"].copy() if n else np.zeros((0, L_in, dim), dtype=np.float32)
    return Dataset(x, y, int(n_classes))


def save_partition(path, stream: TaskStream):
    doc = {"version": 1, "num_classes": stream.num_classes, "tasks": stream.partition()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_partition(path):
    return json.loads(Path(path).read_text())["tasks"]


def serialize_stream(stream: TaskStream) -> bytes:
    """Canonical bytes of a stream: train and test containers + partition JSON."""
    x_tr = np.concatenate([t.train_x for t in stream.tasks])
    y_tr = np.concatenate([t.train_y for t in stream.tasks])
    x_te = np.concatenate([t.test_x for t in stream.tasks])
    y_te = np.concatenate([t.test_y for t in stream.tasks])
    part = json.dumps(stream.partition()).encode()
    return (
        dataset_bytes(Dataset(x_tr, y_tr, stream.num_classes))
        + dataset_bytes(Dataset(x_te, y_te, stream.num_classes))
        + part
    )


def with_seed(config: StreamConfig, seed) -> StreamConfig:
    return replace(config, seed=int(seed))
