"""Sequential training of SI, VCL and coreset VCL on multi-head networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import LabeledDataset, TaskData, TaskSequence
from .si import SIState, si_consolidate, si_path_update, si_penalty
from .vcl import (
    GaussianPosterior,
    PosteriorOptimizer,
    REPARAM_MODES,
    elbo_objective,
    expected_log_lik,
    head_keys,
    kl_diag_gaussian,
    predict_proba,
    trunk_keys,
)

ALGORITHMS = ("si", "vcl", "coreset_vcl", "finetune")


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters of one sequential training run."""

    layer_sizes: tuple[int, ...] = (784, 20)
    epochs: int = 5
    batch_size: int | None = 64  # None means the full training set
    learning_rate: float = 0.001
    si_c: float = 1.0
    si_xi: float = 0.1
    si_clamp: bool = True
    mc_train: int = 10
    mc_eval: int = 100
    coreset_size: int = 0
    init_log_std: float = -3.0  # log-variance -6
    prior_std: float = 1.0
    reparam: str = "local"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.reparam not in REPARAM_MODES:
            raise ValueError(f"reparam must be one of {REPARAM_MODES}")
        if self.coreset_size < 0:
            raise ValueError("coreset_size must be non-negative")

    @property
    def optimizer(self) -> nn.OptimizerConfig:
        return nn.OptimizerConfig(learning_rate=self.learning_rate)


@dataclass(frozen=True)
class RunRecord:
    """``errors[i][j]``: test error on task j after finishing task i (j <= i)."""

    sequence: TaskSequence
    errors: tuple[tuple[float, ...], ...]
    algorithm: str
    seed: int

    def __post_init__(self):
        for i, row in enumerate(self.errors):
            if len(row) != i + 1:
                raise ValueError(f"row {i} of the error matrix must have {i + 1} entries")
            if any(not 0.0 <= e <= 1.0 for e in row):
                raise ValueError("errors must lie in [0, 1]")

    @property
    def complete(self) -> bool:
        return len(self.errors) == len(self.sequence)


@dataclass
class Coreset:
    capacity: int
    entries: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def add(self, head: str, inputs: np.ndarray, labels: np.ndarray):
        if len(labels) > self.capacity:
            raise ValueError(f"{len(labels)} examples exceed coreset capacity {self.capacity}")
        self.entries[head] = (np.array(inputs, dtype=np.float64), np.array(labels, dtype=np.int64))

    def __len__(self):
        return sum(len(y) for _, y in self.entries.values())


def final_hardness(record: RunRecord) -> float:
    """Average test error over all tasks after training on the last one."""
    if not record.complete or not record.errors:
        raise ValueError("record is incomplete: the final row is missing")
    return float(np.mean(record.errors[-1]))


def select_coreset(task: TaskData, size: int, seed) -> tuple[tuple[np.ndarray, np.ndarray], TaskData]:
    """Uniform random coreset; returns ``((inputs, labels), task_without_coreset)``."""
    n = len(task.train)
    if not 0 <= size <= n:
        raise ValueError(f"coreset size {size} outside [0, {n}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picked = np.sort(rng.choice(n, size=size, replace=False)) if size else np.zeros(0, dtype=np.int64)
    keep = np.setdiff1d(np.arange(n), picked)
    core = (task.train.inputs[picked].copy(), task.train.labels[picked].copy())
    if len(keep) == 0:
        return core, None
    rest = TaskData(task.train.subset(keep), task.test, task.origin)
    return core, rest


def run_rng(seed: int, seq_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(seq_index)])


# --- SI and plain fine-tuning ------------------------------------------------


def _train_si_task(net, state, x, y, head, cfg: RunConfig, rng, regularize: bool):
    trunk = net.trunk_blocks()
    blocks = trunk + net.head_blocks(head)
    for blk in blocks:
        blk.reset_optimizer()
    batch = cfg.batch_size or len(y)
    opt = cfg.optimizer
    for _ in range(cfg.epochs):
        for idx in nn.iterate_minibatches(len(y), batch, rng):
            nn.loss_and_backprop(net, x[idx], y[idx], head)
            if state is None:
                for blk in blocks:
                    nn.adam_step(blk, opt)
                continue
            task_grad = nn.flatten([b.grad for b in trunk])
            before = nn.flatten([b.value for b in trunk])
            if regularize:
                _, pen_grad = si_penalty(before, state)
                nn.unflatten_into(task_grad + pen_grad, [b.grad for b in trunk])
            for blk in blocks:
                nn.adam_step(blk, opt)
            after = nn.flatten([b.value for b in trunk])
            si_path_update(state, task_grad, after - before)


def _run_si(sequence, tasks, cfg: RunConfig, rng, use_si: bool):
    net = nn.MultiHeadNet.create(cfg.layer_sizes, rng)
    state = None
    if use_si:
        state = SIState.start(nn.flatten([b.value for b in net.trunk_blocks()]), cfg.si_xi, cfg.si_c)
    rows = []
    for i, task in enumerate(sequence):
        head = task.name
        net.add_head(head, rng)
        data = tasks[task]
        _train_si_task(net, state, data.train.inputs, data.train.labels, head, cfg, rng, regularize=i > 0)
        if state is not None:
            si_consolidate(state, nn.flatten([b.value for b in net.trunk_blocks()]), clamp=cfg.si_clamp)
        row = []
        for prev in sequence.tasks[: i + 1]:
            test = tasks[prev].test
            row.append(nn.error_rate(nn.dense_forward(net, test.inputs, prev.name), test.labels))
        rows.append(tuple(row))
    return tuple(rows), net


# --- VCL -----------------------------------------------------------------------


def _train_vcl_task(post: GaussianPosterior, x, y, head, cfg: RunConfig, rng):
    keys = trunk_keys(post.n_layers) + head_keys(head)
    opt = PosteriorOptimizer(post, keys, cfg.optimizer)
    n = len(y)
    batch = min(cfg.batch_size or n, n)
    if batch == n:
        # full batch: the gradient is order-free, so skip the shuffle copies
        x_sq = x * x if cfg.reparam == "local" else None
        for _ in range(cfg.epochs):
            _, grads = elbo_objective(post, x, y, head, cfg.mc_train, n, rng=rng, mode=cfg.reparam, x_sq=x_sq)
            opt.step(grads)
        return
    for _ in range(cfg.epochs):
        for idx in nn.iterate_minibatches(n, batch, rng):
            _, grads = elbo_objective(post, x[idx], y[idx], head, cfg.mc_train, n, rng=rng, mode=cfg.reparam)
            opt.step(grads)


def _finetune_on_coreset(post: GaussianPosterior, coreset: Coreset, cfg: RunConfig, rng) -> GaussianPosterior:
    """Train a copy of ``post`` (with ``post`` as prior) on every stored coreset."""
    tuned = post.as_prior()
    heads = list(coreset.entries)
    keys = trunk_keys(post.n_layers) + [k for h in heads for k in head_keys(h)]
    opt = PosteriorOptimizer(tuned, keys, cfg.optimizer)
    for _ in range(cfg.epochs):
        _, grads = kl_diag_gaussian(tuned, keys, with_grad=True)
        grads = {k: list(v) for k, v in grads.items()}
        for h in heads:
            cx, cy = coreset.entries[h]
            if len(cy) == 0:
                continue
            # full batch per head, so the N/B scale is 1
            _, g = expected_log_lik(tuned, cx, cy, h, cfg.mc_train, rng, mode=cfg.reparam, coeff=-1.0)
            for k, (gm, gs) in g.items():
                grads[k][0] = grads[k][0] + gm
                grads[k][1] = grads[k][1] + gs
        opt.step({k: tuple(v) for k, v in grads.items()})
    return tuned


def _run_vcl(sequence, tasks, cfg: RunConfig, rng, use_coreset: bool):
    post = GaussianPosterior.create(cfg.layer_sizes, rng, cfg.init_log_std, cfg.prior_std)
    coreset = Coreset(cfg.coreset_size)
    rows = []
    for task in sequence:
        head = task.name
        post.add_head(head, rng, cfg.init_log_std, cfg.prior_std)
        data = tasks[task]
        train = data.train
        if use_coreset and cfg.coreset_size > 0:
            (cx, cy), rest = select_coreset(data, cfg.coreset_size, rng)
            coreset.add(head, cx, cy)
            train = rest.train if rest is not None else None
        if train is not None:
            _train_vcl_task(post, train.inputs, train.labels, head, cfg, rng)
        post = post.as_prior()
        model = post
        if use_coreset and len(coreset):
            model = _finetune_on_coreset(post, coreset, cfg, rng)
        row = []
        for prev in sequence.tasks[: len(rows) + 1]:
            test = tasks[prev].test
            probs = predict_proba(model, test.inputs, prev.name, cfg.mc_eval, rng, cfg.reparam)
            row.append(nn.error_rate(probs, test.labels))
        rows.append(tuple(row))
    return tuple(rows), post


def run_sequence(algorithm: str, sequence: TaskSequence, tasks: dict, config: RunConfig, seed: int,
                 seq_index: int = 0, return_model: bool = False):
    """Train ``algorithm`` on ``sequence`` task by task and record the error matrix.

    ``tasks`` maps each UnitTask to its materialized TaskData. The random
    stream depends only on ``(seed, seq_index)``. With ``return_model`` the
    final network (SI, fine-tuning) or propagated posterior (VCL variants)
    is returned alongside the record.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    missing = [t.name for t in sequence if t not in tasks]
    if missing:
        raise KeyError(f"tasks not materialized: {', '.join(missing)}")
    rng = run_rng(seed, seq_index)
    if algorithm in ("si", "finetune"):
        errors, model = _run_si(sequence, tasks, config, rng, use_si=algorithm == "si")
    else:
        errors, model = _run_vcl(sequence, tasks, config, rng, use_coreset=algorithm == "coreset_vcl")
    record = RunRecord(sequence, errors, algorithm, int(seed))
    return (record, model) if return_model else record
