"""Fisher task embeddings from a dense probe, and the sequence measures built on them.

A task is embedded by freezing the probe trunk, fitting a binary
logistic head on its last-layer features, and averaging the diagonal
Fisher information of the trunk weights over the incoming weights of
every hidden unit.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import LabeledDataset, TaskData, TaskSequence, UnitTask

TRIVIAL = "trivial"
NEAR_ZERO = 1e-30


@dataclass(frozen=True)
class ProbeConfig:
    hidden: tuple[int, ...] = (128, 128)
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 0.001
    cap_per_label: int | None = 2000


@dataclass(frozen=True)
class EmbedConfig:
    l2: float = 1e-3
    max_newton_steps: int = 100
    tol: float = 1e-12
    trivial_size: int = 4000


@dataclass
class ProbeNetwork:
    trunk: list[nn.Dense]
    layer_sizes: list[int]
    identifier: str
    meta: dict = field(default_factory=dict)

    @property
    def unit_count(self) -> int:
        return int(sum(self.layer_sizes[1:]))

    def features(self, inputs) -> list[np.ndarray]:
        return nn.trunk_forward(self.trunk, np.asarray(inputs, dtype=np.float64))

    def save(self, path):
        arrays = {}
        for i, layer in enumerate(self.trunk):
            arrays[f"w{i}"] = layer.weight.value
            arrays[f"b{i}"] = layer.bias.value
        np.savez(path, layer_sizes=np.array(self.layer_sizes), meta=json.dumps(self.meta, sort_keys=True),
                 identifier=self.identifier, **arrays)

    @classmethod
    def load(cls, path) -> "ProbeNetwork":
        with np.load(path) as z:
            sizes = [int(s) for s in z["layer_sizes"]]
            trunk = [nn.Dense(nn.ParamBlock(z[f"w{i}"]), nn.ParamBlock(z[f"b{i}"])) for i in range(len(sizes) - 1)]
            return cls(trunk, sizes, str(z["identifier"]), json.loads(str(z["meta"])))


@dataclass(frozen=True)
class TaskEmbedding:
    values: np.ndarray
    task: str
    probe: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("an embedding is a finite, non-negative vector")
        object.__setattr__(self, "values", v)


def probe_identifier(pooled: LabeledDataset, config: ProbeConfig, seed: int) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"config": asdict(config), "seed": seed}, sort_keys=True).encode())
    h.update(np.ascontiguousarray(pooled.inputs).tobytes())
    h.update(np.ascontiguousarray(pooled.labels).tobytes())
    return h.hexdigest()[:16]


def cap_pooled(dataset: LabeledDataset, cap_per_label: int | None, seed: int) -> LabeledDataset:
    if cap_per_label is None:
        return dataset
    rng = np.random.default_rng([seed, 7])
    keep = []
    for lab in range(dataset.n_labels):
        idx = np.flatnonzero(dataset.labels == lab)
        if len(idx) > cap_per_label:
            idx = np.sort(rng.choice(idx, size=cap_per_label, replace=False))
        keep.append(idx)
    return dataset.subset(np.sort(np.concatenate(keep)))


def train_probe(pooled: LabeledDataset, config: ProbeConfig = ProbeConfig(), seed: int = 0) -> ProbeNetwork:
    """Train a dense trunk with an L-way head on the pooled data, then drop the head."""
    labels_present = np.unique(pooled.labels)
    if len(labels_present) < 2:
        raise ValueError("the pooled dataset needs at least two classes")
    data = cap_pooled(pooled, config.cap_per_label, seed)
    rng = np.random.default_rng([seed, 11])
    sizes = [data.inputs.shape[1], *config.hidden]
    net = nn.MultiHeadNet.create(sizes, rng, n_outputs=pooled.n_labels)
    net.add_head("pooled", rng)
    nn.train_epochs(net, data.inputs, data.labels, "pooled", config.epochs, config.batch_size, rng,
                    nn.OptimizerConfig(learning_rate=config.learning_rate))
    train_error = nn.error_rate(nn.dense_forward(net, data.inputs, "pooled"), data.labels)
    meta = {"seed": seed, "epochs": config.epochs, "train_error": train_error,
            "hidden": list(config.hidden), "n_train": len(data)}
    return ProbeNetwork(net.trunk, sizes, probe_identifier(pooled, config, seed), meta)


def fit_logistic_head(features: np.ndarray, labels: np.ndarray, l2: float, max_steps: int = 100,
                      tol: float = 1e-12) -> np.ndarray:
    """L2-regularized logistic regression by Newton's method; returns ``[w..., b]``.

    Bias is regularized too so that a constant-label task has a finite optimum.
    """
    n = len(labels)
    design = np.hstack([features, np.ones((n, 1))])
    y = labels.astype(np.float64)
    theta = np.zeros(design.shape[1])
    for _ in range(max_steps):
        p = 1.0 / (1.0 + np.exp(-(design @ theta)))
        grad = design.T @ (p - y) / n + l2 * theta
        hess = (design * (p * (1.0 - p))[:, None]).T @ design / n + l2 * np.eye(len(theta))
        step = np.linalg.solve(hess, grad)
        theta = theta - step
        if not np.all(np.isfinite(theta)):
            raise nn.DivergenceError("head training diverged")
        if np.max(np.abs(step)) < tol * max(1.0, np.max(np.abs(theta))):
            break
    return theta


def _fisher_per_unit(probe: ProbeNetwork, inputs: np.ndarray, labels: np.ndarray, config: EmbedConfig) -> np.ndarray:
    acts = probe.features(inputs)
    theta = fit_logistic_head(acts[-1], labels, config.l2, config.max_newton_steps, config.tol)
    w, b = theta[:-1], theta[-1]
    score = acts[-1] @ w + b
    p1 = 1.0 / (1.0 + np.exp(-score))
    # E_y[(d log p(y|x) / d theta)^2] = p0 * p1 * (d score / d theta)^2 for a binary head
    weight = p1 * (1.0 - p1)
    n = len(labels)
    delta = np.broadcast_to(w, (n, len(w))) * (acts[-1] > 0)
    per_layer = []
    for li in range(len(probe.trunk) - 1, -1, -1):
        h_in = acts[li]
        fan_in = h_in.shape[1]
        in_norm = np.einsum("ij,ij->i", h_in, h_in)
        per_layer.append(((weight * in_norm) @ (delta * delta)) / (n * fan_in))
        if li > 0:
            delta = (delta @ probe.trunk[li].weight.value.T) * (acts[li] > 0)
    return np.concatenate(per_layer[::-1])


def embed_task(probe: ProbeNetwork, task: TaskData, config: EmbedConfig = EmbedConfig(), seed: int = 0) -> TaskEmbedding:
    """Per-unit averaged diagonal Fisher of the probe trunk for ``task``.

    The pipeline is deterministic; ``seed`` is accepted for interface
    symmetry with the other embedding routines.
    """
    values = _fisher_per_unit(probe, task.train.inputs, task.train.labels, config)
    return TaskEmbedding(values, task.origin.name, probe.identifier)


def trivial_embedding(probe: ProbeNetwork, pooled_inputs, config: EmbedConfig = EmbedConfig(), seed: int = 0) -> TaskEmbedding:
    """Embedding of the constant-label task over (a subsample of) the pooled inputs."""
    x = np.asarray(pooled_inputs, dtype=np.float64)
    if config.trivial_size and len(x) > config.trivial_size:
        rng = np.random.default_rng([seed, 13])
        x = x[np.sort(rng.choice(len(x), size=config.trivial_size, replace=False))]
    values = _fisher_per_unit(probe, x, np.zeros(len(x), dtype=np.int64), config)
    return TaskEmbedding(values, TRIVIAL, probe.identifier)


# --- distances and sequence measures ----------------------------------------


def _values(e) -> np.ndarray:
    return e.values if isinstance(e, TaskEmbedding) else np.asarray(e, dtype=np.float64)


def normalized_cos_distance(e1, e2) -> float:
    """Cosine distance between ``e1/(e1+e2)`` and ``e2/(e1+e2)`` (elementwise division)."""
    a, b = _values(e1), _values(e2)
    if a.shape != b.shape:
        raise ValueError(f"embedding lengths differ: {a.shape} vs {b.shape}")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("embeddings must be non-negative")
    keep = (a >= NEAR_ZERO) | (b >= NEAR_ZERO)
    a, b = a[keep], b[keep]
    total = a + b
    u, v = a / total, b / total
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("an embedding is entirely zero on the shared support")
    return float(min(1.0, max(0.0, 1.0 - np.dot(u, v) / (nu * nv))))


@dataclass
class EmbeddingTable:
    """Embeddings of every unit task plus the trivial task, all from one probe."""

    probe: str
    tasks: dict[str, TaskEmbedding]
    trivial: TaskEmbedding

    def __getitem__(self, task) -> TaskEmbedding:
        key = task.name if isinstance(task, UnitTask) else str(task)
        if key == TRIVIAL:
            return self.trivial
        try:
            return self.tasks[key]
        except KeyError:
            raise KeyError(f"no embedding for task {key}") from None

    def complexity(self, task) -> float:
        return task_complexity(self[task], self.trivial)

    def complexities(self) -> dict[str, float]:
        return {k: self.complexity(k) for k in sorted(self.tasks)}


def task_complexity(e_t: TaskEmbedding, e_0: TaskEmbedding) -> float:
    if e_t.probe != e_0.probe:
        raise ValueError(f"embeddings come from different probes ({e_t.probe} vs {e_0.probe})")
    return normalized_cos_distance(e_t, e_0)


def total_complexity(sequence: TaskSequence, embeddings: EmbeddingTable) -> float:
    return float(sum(embeddings.complexity(t) for t in sequence))


def sequential_heterogeneity(sequence: TaskSequence, embeddings: EmbeddingTable) -> float:
    tasks = list(sequence)
    return float(sum(normalized_cos_distance(embeddings[a], embeddings[b]) for a, b in zip(tasks, tasks[1:])))


# --- on-disk cache -----------------------------------------------------------


def _task_filename(task: str) -> str:
    return task.replace("/", "-") + ".txt"


class EmbeddingCache:
    """Text files under ``root/<probe>/``: a header of three lines, then one value per line."""

    def __init__(self, root):
        self.root = str(root)
        self._lock = threading.Lock()

    def path(self, probe: str, task: str) -> str:
        return os.path.join(self.root, probe, _task_filename(task))

    def get(self, probe: str, task: str) -> TaskEmbedding | None:
        path = self.path(probe, task)
        if not os.path.exists(path):
            return None
        with open(path) as f:
            lines = f.read().splitlines()
        header = dict(line.split(" ", 1) for line in lines[:3])
        if header.get("probe") != probe or header.get("task") != task:
            raise ValueError(f"{path}: header does not match ({header})")
        values = np.array([float(v) for v in lines[3:]], dtype=np.float64)
        if len(values) != int(header["units"]):
            raise ValueError(f"{path}: expected {header['units']} values, found {len(values)}")
        return TaskEmbedding(values, task, probe)

    def put(self, emb: TaskEmbedding):
        path = self.path(emb.probe, emb.task)
        body = [f"probe {emb.probe}", f"task {emb.task}", f"units {len(emb.values)}"]
        body += [repr(float(v)) for v in emb.values]
        with self._lock:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            tmp = path + ".tmp"
            with open(tmp, "w") as f:
                f.write("\n".join(body) + "\n")
            os.replace(tmp, path)

    def write_manifest(self, probe: str, manifest: dict):
        path = os.path.join(self.root, probe, "manifest.json")
        with self._lock:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w") as f:
                json.dump(manifest, f, indent=2, sort_keys=True)
                f.write("\n")


def embed_all(probe: ProbeNetwork, tasks: dict[UnitTask, TaskData], pooled_inputs, config: EmbedConfig = EmbedConfig(),
              seed: int = 0, cache: EmbeddingCache | None = None) -> EmbeddingTable:
    """Embed every task and the trivial task, reading and filling ``cache``."""

    def get_or_compute(name, compute):
        if cache is not None:
            hit = cache.get(probe.identifier, name)
            if hit is not None:
                return hit
        emb = compute()
        if cache is not None:
            cache.put(emb)
        return emb

    out = {}
    for task in sorted(tasks):
        out[task.name] = get_or_compute(task.name, lambda t=task: embed_task(probe, tasks[t], config, seed))
    trivial = get_or_compute(TRIVIAL, lambda: trivial_embedding(probe, pooled_inputs, config, seed))
    if cache is not None:
        cache.write_manifest(probe.identifier, {"probe": probe.identifier, "probe_meta": probe.meta,
                                                "embed_config": asdict(config), "seed": seed,
                                                "tasks": sorted(out), "unit_count": probe.unit_count})
    return EmbeddingTable(probe.identifier, out, trivial)
