"""End-to-end pipeline: probe, embeddings, sequence plans, training runs, aggregation."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import OrderedDict
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import embed as E
from .config import ExperimentConfig
from .continual import RunRecord, final_hardness, run_sequence
from .data import (
    TaskSequence,
    greedy_extreme_sequence,
    load_idx,
    make_unit_tasks,
    materialize_task,
    mnist_paths,
    sample_permutation_sequences,
    sample_sequences,
)
from .nn import DivergenceError
from .results import ResultRow, mean_row

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlannedSequence:
    seq_id: int
    plan: str
    sequence: TaskSequence
    algorithms: tuple[str, ...]


@dataclass(frozen=True)
class RunSpec:
    seq_id: int
    algorithm: str
    seed: int


@dataclass
class ExperimentResult:
    rows: list[ResultRow]
    seed_rows: list[ResultRow]
    diverged: list[RunSpec] = field(default_factory=list)
    excluded: list[tuple[int, str]] = field(default_factory=list)
    n_runs: int = 0

    @property
    def divergence_fraction(self) -> float:
        return len(self.diverged) / self.n_runs if self.n_runs else 0.0


# --- data and embeddings -----------------------------------------------------


def load_mnist(cfg: ExperimentConfig):
    paths = mnist_paths(cfg.mnist_dir)
    for p in paths.values():
        if not os.path.exists(p):
            raise FileNotFoundError(f"dataset file not found: {p}")
    train = load_idx(paths["train_images"], paths["train_labels"], n_labels=10)
    test = load_idx(paths["test_images"], paths["test_labels"], n_labels=10)
    return train, test


class TaskStore(Mapping):
    """Unit tasks materialized on demand, keeping only the most recent few in memory.

    All 45 MNIST tasks at the default cap take well over a gigabyte, while
    a run touches five of them and rebuilding one takes milliseconds.
    """

    def __init__(self, train, test, cfg: ExperimentConfig, only=None, keep: int = 8):
        self.train, self.test = train, test
        self.cap, self.test_cap, self.seed = cfg.cap_per_label, cfg.test_cap_per_label, cfg.data_seed
        self.tasks = sorted(only) if only is not None else make_unit_tasks(train)
        self._known = set(self.tasks)
        self._recent: OrderedDict = OrderedDict()
        self.keep = keep

    def __getitem__(self, task):
        if task not in self._known:
            raise KeyError(task)
        if task in self._recent:
            self._recent.move_to_end(task)
            return self._recent[task]
        data = materialize_task(self.train, self.test, task, self.cap, self.seed, self.test_cap)
        self._recent[task] = data
        while len(self._recent) > self.keep:
            self._recent.popitem(last=False)
        return data

    def __contains__(self, task):
        return task in self._known

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)


def materialize_all(train, test, cfg: ExperimentConfig, only=None) -> TaskStore:
    return TaskStore(train, test, cfg, only)


def prepare_probe(cfg: ExperimentConfig, train) -> E.ProbeNetwork:
    ident = E.probe_identifier(train, cfg.probe, cfg.probe_seed)
    path = os.path.join(cfg.out_dir, "probe", f"{ident}.npz")
    if os.path.exists(path):
        return E.ProbeNetwork.load(path)
    log.info("training probe %s", ident)
    probe = E.train_probe(train, cfg.probe, cfg.probe_seed)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    probe.save(path)
    return probe


def prepare_embeddings(cfg: ExperimentConfig, train, tasks, probe) -> E.EmbeddingTable:
    cache = E.EmbeddingCache(os.path.join(cfg.out_dir, "embeddings"))
    return E.embed_all(probe, tasks, train.inputs, cfg.embed, cfg.probe_seed, cache)


# --- plans and runs ----------------------------------------------------------


def _plan_label(kind: str, name: str, suffix: str | None = None) -> str:
    label = kind if name == kind else f"{kind}:{name}"
    if suffix:
        label = f"{label}:{suffix}" if ":" in label else f"{kind}:{suffix}"
    return label


def build_sequences(cfg: ExperimentConfig, table: E.EmbeddingTable | None, unit_tasks) -> list[PlannedSequence]:
    """Expand every plan into numbered sequences (ids are global and contiguous)."""
    out = []
    for plan in cfg.plans:
        if plan.kind == "random":
            seqs = [(s, None) for s in sample_sequences(unit_tasks, plan.n, plan.k, plan.seed)]
        elif plan.kind == "permutations":
            seqs = [(s, None) for s in sample_permutation_sequences(plan.base, plan.n, plan.seed)]
        elif plan.kind == "explicit":
            seqs = [(s, None) for s in plan.sequences]
        else:
            if table is None:
                raise ValueError("greedy plans need task complexities")
            cx = {t: table.complexity(t) for t in unit_tasks}
            seqs = [(greedy_extreme_sequence(unit_tasks, cx, d, plan.start, plan.k), d) for d in plan.directions]
        for seq, suffix in seqs:
            out.append(PlannedSequence(len(out), _plan_label(plan.kind, plan.name, suffix), seq, plan.algorithms))
    return out


def enumerate_runs(planned: list[PlannedSequence], seeds) -> list[RunSpec]:
    return [RunSpec(p.seq_id, a, s) for p in planned for a in p.algorithms for s in seeds]


def _data_fingerprint(cfg: ExperimentConfig) -> dict:
    sizes = {k: os.path.getsize(p) for k, p in mnist_paths(cfg.mnist_dir).items() if os.path.exists(p)}
    return {"files": sizes, "cap": cfg.cap_per_label, "test_cap": cfg.test_cap_per_label, "seed": cfg.data_seed}


def run_key(cfg: ExperimentConfig, spec: RunSpec, sequence: TaskSequence) -> str:
    payload = {"algorithm": spec.algorithm, "seed": spec.seed, "seq_index": spec.seq_id, "sequence": str(sequence),
               "run_config": asdict(cfg.run_config(spec.algorithm)), "data": _data_fingerprint(cfg)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:24]


class RunCache:
    """One JSON file per finished run, keyed by everything that determines its outcome."""

    def __init__(self, root):
        self.root = str(root)

    def _path(self, key):
        return os.path.join(self.root, key[:2], f"{key}.json")

    def get(self, key):
        path = self._path(key)
        if not os.path.exists(path):
            return None
        with open(path) as f:
            return json.load(f)

    def put(self, key, payload):
        path = self._path(key)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(payload, f, sort_keys=True)
        os.replace(tmp, path)


_WORKER = {}


def _init_worker(cfg: ExperimentConfig, needed, data=None):
    train, test = load_mnist(cfg) if data is None else data
    _WORKER["cfg"] = cfg
    _WORKER["tasks"] = materialize_all(train, test, cfg, only=needed)


def _execute(job):
    spec, sequence_text = job
    cfg = _WORKER["cfg"]
    sequence = TaskSequence.parse(sequence_text)
    try:
        rec = run_sequence(spec.algorithm, sequence, _WORKER["tasks"], cfg.run_config(spec.algorithm), spec.seed,
                           seq_index=spec.seq_id)
        return {"status": "ok", "errors": [list(r) for r in rec.errors]}
    except DivergenceError as exc:
        return {"status": "diverged", "reason": str(exc)}


def execute_runs(cfg: ExperimentConfig, planned: list[PlannedSequence], specs: list[RunSpec],
                 jobs: int | None = None, data=None) -> dict[RunSpec, dict]:
    """Run (or load from cache) every spec; the outcome never depends on ``jobs``."""
    by_id = {p.seq_id: p.sequence for p in planned}
    cache = RunCache(os.path.join(cfg.out_dir, "cache", "runs"))
    outcomes, todo = {}, []
    for spec in specs:
        key = run_key(cfg, spec, by_id[spec.seq_id])
        hit = cache.get(key)
        if hit is not None:
            outcomes[spec] = hit
        else:
            todo.append((spec, key))
    log.info("%d runs cached, %d to compute", len(outcomes), len(todo))
    if not todo:
        return outcomes
    needed = sorted({t for spec, _ in todo for t in by_id[spec.seq_id]})
    jobs = cfg.jobs if jobs is None else jobs
    work = [(spec, str(by_id[spec.seq_id])) for spec, _ in todo]
    if jobs <= 1:
        _init_worker(cfg, needed, data)
        results = map(_execute, work)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(cfg, needed))
        results = pool.map(_execute, work, chunksize=1)
    try:
        for n, ((spec, key), outcome) in enumerate(zip(todo, results), 1):
            cache.put(key, outcome)
            outcomes[spec] = outcome
            if n % 10 == 0 or n == len(todo):
                log.info("finished %d/%d runs", n, len(todo))
    finally:
        if pool is not None:
            pool.shutdown()
    return outcomes


def aggregate(cfg: ExperimentConfig, planned, specs, outcomes, table) -> ExperimentResult:
    """Seed rows for every successful run; one mean row per (sequence, algorithm) with no divergent seed."""
    by_id = {p.seq_id: p for p in planned}
    seed_rows, diverged = [], []
    groups: dict[tuple[int, str], list] = {}
    for spec in sorted(specs, key=lambda s: (s.seq_id, s.algorithm, s.seed)):
        p = by_id[spec.seq_id]
        outcome = outcomes[spec]
        groups.setdefault((spec.seq_id, spec.algorithm), [])
        if outcome["status"] != "ok":
            diverged.append(spec)
            groups[(spec.seq_id, spec.algorithm)].append(None)
            continue
        errors = tuple(tuple(row) for row in outcome["errors"])
        rec = RunRecord(p.sequence, errors, spec.algorithm, spec.seed)
        flat = tuple(e for row in errors for e in row)
        row = ResultRow(spec.seq_id, spec.algorithm, cfg.setting, str(p.sequence),
                        E.total_complexity(p.sequence, table), E.sequential_heterogeneity(p.sequence, table),
                        p.plan, final_hardness(rec), flat, spec.seed)
        seed_rows.append(row)
        groups[(spec.seq_id, spec.algorithm)].append(row)
    rows, excluded = [], []
    for key in sorted(groups):
        members = groups[key]
        if any(m is None for m in members):
            excluded.append(key)
            continue
        rows.append(mean_row(members))
    if cfg.aggregate == "per_seed":
        bad = set(excluded)
        rows = [r for r in seed_rows if (r.seq_id, r.algorithm) not in bad]
    return ExperimentResult(rows, seed_rows, diverged, excluded, len(specs))


def orchestrate_experiment(cfg: ExperimentConfig, dry_run: bool = False, jobs: int | None = None):
    """Probe, embed, plan, train and aggregate; with ``dry_run`` only the run list is returned."""
    train, test = load_mnist(cfg)
    unit_tasks = make_unit_tasks(train)
    needs_table = not dry_run or any(p.kind == "greedy" for p in cfg.plans)
    table = None
    if needs_table:
        tasks = materialize_all(train, test, cfg)
        probe = prepare_probe(cfg, train)
        table = prepare_embeddings(cfg, train, tasks, probe)
    planned = build_sequences(cfg, table, unit_tasks)
    specs = enumerate_runs(planned, cfg.seeds)
    if dry_run:
        return planned, specs
    outcomes = execute_runs(cfg, planned, specs, jobs, data=(train, test))
    result = aggregate(cfg, planned, specs, outcomes, table)
    if result.diverged:
        log.warning("%d of %d runs diverged; %d (sequence, algorithm) rows excluded",
                    len(result.diverged), result.n_runs, len(result.excluded))
    return result


def experiment_manifest(cfg: ExperimentConfig, result: ExperimentResult, probe_id: str) -> dict:
    return {
        "config": cfg.to_json(),
        "probe": probe_id,
        "runs": result.n_runs,
        "rows": len(result.rows),
        "diverged_runs": [asdict(s) for s in result.diverged],
        "excluded_rows": [{"seq_id": s, "algorithm": a} for s, a in result.excluded],
    }


def complexity_rows(table: E.EmbeddingTable) -> list[tuple[str, float, float]]:
    return [(name, table.complexity(name), float(np.linalg.norm(table[name].values))) for name in sorted(table.tasks)]
