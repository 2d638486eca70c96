"""IDX ingestion, binary unit tasks and task-sequence sampling."""

from __future__ import annotations

import itertools
import math
import os
import struct
from dataclasses import dataclass
from functools import total_ordering

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_labels: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels) or len(self.labels) == 0:
            raise ValueError("inputs and labels must have equal, non-zero length")
        if self.labels.min() < 0 or self.labels.max() >= self.n_labels:
            raise ValueError(f"labels must lie in [0, {self.n_labels})")
        self.inputs.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.n_labels)


@total_ordering
@dataclass(frozen=True)
class UnitTask:
    """Binary task between two original labels, written ``"a/b"``."""

    label_a: int
    label_b: int
    source: str = "mnist"

    def __post_init__(self):
        if self.label_a == self.label_b:
            raise ValueError("a unit task needs two different labels")
        if self.label_a > self.label_b:
            a, b = self.label_b, self.label_a
            object.__setattr__(self, "label_a", a)
            object.__setattr__(self, "label_b", b)

    @classmethod
    def parse(cls, text: str, source: str = "mnist") -> "UnitTask":
        try:
            a, b = text.strip().split("/")
            return cls(int(a), int(b), source)
        except ValueError as exc:
            raise ValueError(f"bad task notation {text!r}, expected 'a/b'") from exc

    @property
    def name(self) -> str:
        return f"{self.label_a}/{self.label_b}"

    def __str__(self):
        return self.name

    def __lt__(self, other):
        return (self.label_a, self.label_b) < (other.label_a, other.label_b)


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple[UnitTask, ...]

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if len(self.tasks) < 1:
            raise ValueError("a task sequence needs at least one task")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError(f"tasks in a sequence must be distinct: {self}")

    @classmethod
    def parse(cls, text: str) -> "TaskSequence":
        return cls(tuple(UnitTask.parse(t) for t in text.split("|")))

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __str__(self):
        return "|".join(t.name for t in self.tasks)


@dataclass(frozen=True)
class TaskData:
    train: LabeledDataset
    test: LabeledDataset
    origin: UnitTask


# --- IDX files -------------------------------------------------------------


def _read_idx(path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = raw[header:]
    if len(payload) != math.prod(dims):
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, header promises {math.prod(dims)}")
    return dims, payload


def load_idx(images_path, labels_path, n_labels: int | None = None) -> LabeledDataset:
    """Parse an IDX image/label file pair; pixels are scaled into [0, 1]."""
    idims, ipay = _read_idx(images_path, IMAGE_MAGIC)
    ldims, lpay = _read_idx(labels_path, LABEL_MAGIC)
    if idims[0] != ldims[0]:
        raise DataFormatError(f"{idims[0]} images but {ldims[0]} labels")
    if idims[0] == 0:
        raise DataFormatError("empty dataset")
    pixels = np.frombuffer(ipay, dtype=np.uint8).reshape(idims[0], -1)
    inputs = pixels.astype(np.float64) / 255.0
    labels = np.frombuffer(lpay, dtype=np.uint8).astype(np.int64)
    if n_labels is None:
        n_labels = int(labels.max()) + 1
    return LabeledDataset(inputs, labels, n_labels)


def write_idx(dataset: LabeledDataset, images_path, labels_path, image_shape=None):
    """Write ``dataset`` back to IDX; inputs must be multiples of 1/255."""
    n, width = dataset.inputs.shape
    if image_shape is None:
        side = math.isqrt(width)
        image_shape = (side, side) if side * side == width else (1, width)
    rows, cols = image_shape
    if rows * cols != width:
        raise ValueError(f"image shape {image_shape} does not hold {width} values")
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_paths(directory) -> dict[str, str]:
    return {k: os.path.join(directory, v) for k, v in MNIST_FILES.items()}


# --- tasks -----------------------------------------------------------------


def make_unit_tasks(dataset_or_labels, source: str = "mnist") -> list[UnitTask]:
    """All label pairs, sorted lexicographically (45 for ten labels)."""
    n_labels = getattr(dataset_or_labels, "n_labels", dataset_or_labels)
    if n_labels < 2:
        raise ValueError("need at least two labels to form a binary task")
    return [UnitTask(a, b, source) for a, b in itertools.combinations(range(n_labels), 2)]


def _cap_indices(idx: np.ndarray, cap: int | None, rng: np.random.Generator) -> np.ndarray:
    if cap is None or len(idx) <= cap:
        return idx
    return np.sort(rng.choice(idx, size=cap, replace=False))


def materialize_task(train: LabeledDataset, test: LabeledDataset, task: UnitTask,
                     cap_per_label: int | None = None, seed: int = 0,
                     test_cap_per_label: int | None = None) -> TaskData:
    """Filter both splits to the task's two labels and relabel a -> 0, b -> 1."""
    if cap_per_label is not None and cap_per_label <= 0:
        raise ValueError("cap_per_label must be positive")
    rng = np.random.default_rng([seed, task.label_a, task.label_b])
    parts = {}
    for split, ds, cap in (("train", train, cap_per_label), ("test", test, test_cap_per_label)):
        chosen = []
        for lab in (task.label_a, task.label_b):
            idx = np.flatnonzero(ds.labels == lab)
            if len(idx) == 0:
                raise DataFormatError(f"label {lab} absent from the {split} split")
            chosen.append(_cap_indices(idx, cap, rng))
        idx = np.sort(np.concatenate(chosen))
        x = ds.inputs[idx]
        y = (ds.labels[idx] == task.label_b).astype(np.int64)
        parts[split] = LabeledDataset(x, y, 2)
    return TaskData(parts["train"], parts["test"], task)


def sample_sequences(tasks, n: int, k: int, seed: int) -> list[TaskSequence]:
    """``n`` sequences of ``k`` distinct tasks drawn without replacement."""
    tasks = list(tasks)
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 1 <= k <= len(tasks):
        raise ValueError(f"cannot draw {k} distinct tasks from {len(tasks)}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        picks = rng.choice(len(tasks), size=k, replace=False)
        out.append(TaskSequence(tuple(tasks[i] for i in picks)))
    return out


def sample_permutation_sequences(base, n: int, seed: int) -> list[TaskSequence]:
    """``n`` distinct orderings of ``base``; all of them, sorted, when n = k!."""
    base = sorted(base)
    if len(set(base)) != len(base):
        raise ValueError("base tasks must be distinct")
    total = math.factorial(len(base))
    if not 1 <= n <= total:
        raise ValueError(f"cannot draw {n} distinct orderings of {len(base)} tasks ({total} exist)")
    if n == total:
        return [TaskSequence(p) for p in itertools.permutations(base)]
    rng = np.random.default_rng(seed)
    seen = set()
    out = []
    while len(out) < n:
        perm = tuple(base[i] for i in rng.permutation(len(base)))
        if perm not in seen:
            seen.add(perm)
            out.append(TaskSequence(perm))
    return out


def greedy_extreme_sequence(tasks, complexity, direction: str, start: UnitTask, k: int) -> TaskSequence:
    """Start at ``start`` and repeatedly append the most (or least) complex remaining task."""
    if direction not in ("highest", "lowest"):
        raise ValueError("direction must be 'highest' or 'lowest'")
    tasks = sorted(tasks)
    if start not in tasks:
        raise ValueError(f"start task {start} is not among the candidates")
    if not 1 <= k <= len(tasks):
        raise ValueError(f"cannot build a sequence of {k} from {len(tasks)} tasks")
    sign = -1.0 if direction == "highest" else 1.0
    chosen = [start]
    remaining = [t for t in tasks if t != start]
    while len(chosen) < k:
        # min() keeps the first (lexicographically smallest) task among ties
        best = min(remaining, key=lambda t: sign * complexity[t])
        chosen.append(best)
        remaining.remove(best)
    return TaskSequence(tuple(chosen))
