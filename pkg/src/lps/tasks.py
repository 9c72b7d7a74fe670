"""Task sequences: permuted images, class splits, synthetic Gaussian blobs."""
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .seeding import rng_for

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledData:
    """A train/test split of flat feature vectors with integer labels."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def input_dim(self):
        return self.x_train.shape[1]

    @property
    def class_count(self):
        return int(max(self.y_train.max(), self.y_test.max())) + 1


@dataclass
class TaskDataset:
    task_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    class_count: int
    permutation: np.ndarray = None
    classes: tuple = None

    def __post_init__(self):
        for y in (self.y_train, self.y_test):
            if y.size and (y.min() < 0 or y.max() >= self.class_count):
                raise ValueError(f"task {self.task_id}: labels outside [0, {self.class_count})")

    @property
    def input_dim(self):
        return self.x_train.shape[1]


# -- file formats -------------------------------------------------------------


def _open(path):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path, expected_magic=None):
    """Read an unsigned-byte IDX file (big-endian header) into an array."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: file too short for an IDX header")
    magic, = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise ValueError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    if magic >> 8 != 0x08:
        raise ValueError(f"{path}: only unsigned-byte IDX data is supported (magic {magic:#010x})")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) - header_end != count:
        raise ValueError(f"{path}: expected {count} data bytes, found {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory):
    """MNIST-style IDX files in ``directory``, pixels scaled to [0, 1]."""
    def images(stem):
        arr = read_idx(_find(directory, stem), IDX_IMAGES_MAGIC)
        return arr.reshape(arr.shape[0], -1).astype(np.float64) / 255.0

    def labels(stem):
        return read_idx(_find(directory, stem), IDX_LABELS_MAGIC).astype(np.int64)

    data = LabeledData(
        images("train-images-idx3-ubyte"), labels("train-labels-idx1-ubyte"),
        images("t10k-images-idx3-ubyte"), labels("t10k-labels-idx1-ubyte"),
    )
    if len(data.x_train) != len(data.y_train) or len(data.x_test) != len(data.y_test):
        raise ValueError(f"{directory}: image and label counts differ")
    return data


def load_csv(path):
    """Rows of ``label, feature, feature, ...``; returns ``(x, y)``."""
    table = np.loadtxt(path, delimiter=",", ndmin=2)
    if table.shape[1] < 2:
        raise ValueError(f"{path}: need a label column and at least one feature")
    return table[:, 1:].astype(np.float64), table[:, 0].astype(np.int64)


# -- sampling -----------------------------------------------------------------


def stratified_subsample(y, cap, rng):
    """Sorted indices of a class-stratified draw of ``cap`` samples from ``y``."""
    if cap is None or cap >= len(y):
        return np.arange(len(y))
    classes, counts = np.unique(y, return_counts=True)
    quota = np.floor(counts * cap / len(y)).astype(int)
    # distribute the rounding remainder to the largest fractional parts
    remainder = cap - quota.sum()
    frac = counts * cap / len(y) - quota
    quota[np.argsort(-frac, kind="stable")[:remainder]] += 1
    picked = [rng.choice(np.flatnonzero(y == c), size=k, replace=False) for c, k in zip(classes, quota)]
    return np.sort(np.concatenate(picked))


def subsample(data, train_cap, test_cap, seed):
    for cap, n in ((train_cap, len(data.y_train)), (test_cap, len(data.y_test))):
        if cap is not None and cap > n:
            raise ValueError(f"sample cap {cap} exceeds the {n} available samples")
    tr = stratified_subsample(data.y_train, train_cap, rng_for(seed, "subsample", "train"))
    te = stratified_subsample(data.y_test, test_cap, rng_for(seed, "subsample", "test"))
    return LabeledData(data.x_train[tr], data.y_train[tr], data.x_test[te], data.y_test[te])


# -- suites -------------------------------------------------------------------


def make_permuted_tasks(base, n, seed):
    """Task 1 is ``base`` itself; task k > 1 permutes pixels with its own fixed permutation."""
    if n < 1:
        raise ValueError(f"need at least one task, got {n}")
    d = base.input_dim
    classes = base.class_count
    tasks = []
    for t in range(1, n + 1):
        perm = np.arange(d) if t == 1 else rng_for(seed, "permutation", t).permutation(d)
        tasks.append(TaskDataset(
            t, base.x_train[:, perm], base.y_train.copy(), base.x_test[:, perm], base.y_test.copy(),
            classes, permutation=perm,
        ))
    return tasks


def make_split_tasks(data, classes_per_task, n, seed, shuffle_classes=False):
    """Disjoint groups of ``classes_per_task`` classes, labels remapped to ``0..C-1``.

    Groups are consecutive class ids unless ``shuffle_classes`` draws a seeded
    random partition.
    """
    all_classes = np.unique(np.concatenate([data.y_train, data.y_test]))
    if n < 1 or classes_per_task < 1:
        raise ValueError("need n >= 1 and classes_per_task >= 1")
    if n * classes_per_task > len(all_classes):
        raise ValueError(f"{n} tasks x {classes_per_task} classes exceeds {len(all_classes)} classes")
    order = rng_for(seed, "split").permutation(all_classes) if shuffle_classes else all_classes
    tasks = []
    for t in range(1, n + 1):
        group = order[(t - 1) * classes_per_task: t * classes_per_task]
        remap = {int(c): i for i, c in enumerate(group)}
        tr = np.isin(data.y_train, group)
        te = np.isin(data.y_test, group)
        tasks.append(TaskDataset(
            t, data.x_train[tr], np.array([remap[int(c)] for c in data.y_train[tr]], dtype=np.int64),
            data.x_test[te], np.array([remap[int(c)] for c in data.y_test[te]], dtype=np.int64),
            classes_per_task, classes=tuple(int(c) for c in group),
        ))
    return tasks


def _frame(rng, class_count, input_dim):
    """Random orthonormal rows (one per class); Gaussian directions if too many classes."""
    g = rng.standard_normal((input_dim, class_count))
    if class_count > input_dim:
        return (g / np.linalg.norm(g, axis=0)).T
    return _orthonormalize(g.T)


def _orthonormalize(rows):
    q, r = np.linalg.qr(rows.T)
    # fix signs so an already-orthonormal input comes back unchanged
    return (q * np.where(np.diag(r) < 0, -1.0, 1.0)).T


def make_blob_tasks(n, input_dim, class_count, samples, seed, similarity=1.0,
                    separation=6.0, test_samples=None):
    """Gaussian clusters (unit noise) with tunable inter-task similarity.

    Class centers are orthonormal directions scaled so every pair of centers
    is ``separation`` noise standard deviations apart. A task's frame is
    ``similarity * shared + (1 - similarity) * own``, re-orthonormalised:
    1.0 gives every task the same centers, 0.0 independent ones.
    """
    if n < 1 or input_dim < 1 or class_count < 2 or samples < class_count:
        raise ValueError("degenerate blob suite sizes")
    if not 0.0 <= similarity <= 1.0:
        raise ValueError(f"similarity must lie in [0, 1], got {similarity}")
    test_samples = samples // 4 if test_samples is None else test_samples
    if test_samples < 1:
        raise ValueError("need at least one test sample")
    radius = separation / np.sqrt(2.0)
    shared = _frame(rng_for(seed, "blobs", "shared"), class_count, input_dim)
    tasks = []
    for t in range(1, n + 1):
        if similarity == 1.0:
            frame = shared
        else:
            own = _frame(rng_for(seed, "blobs", "centers", t), class_count, input_dim)
            mix = similarity * shared + (1.0 - similarity) * own
            frame = _orthonormalize(mix) if class_count <= input_dim else mix / np.linalg.norm(mix, axis=1, keepdims=True)
        centers = radius * frame
        rng = rng_for(seed, "blobs", "samples", t)

        def draw(count):
            y = np.arange(count) % class_count
            y = y[rng.permutation(count)]
            x = centers[y] + rng.standard_normal((count, input_dim))
            return x, y.astype(np.int64)

        x_tr, y_tr = draw(samples)
        x_te, y_te = draw(test_samples)
        tasks.append(TaskDataset(t, x_tr, y_tr, x_te, y_te, class_count))
    return tasks


def batches(x, y, batch_size, seed, epoch):
    """Shuffled minibatches, seeded by ``(seed, epoch)``; last partial batch kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(y)
    if n == 0:
        raise ValueError("empty dataset")
    order = rng_for(seed, "batches", epoch).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]
