"""Result rows and their CSV form."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

BASE_COLUMNS = ("seq_id", "algorithm", "setting", "tasks", "total_complexity", "seq_heterogeneity", "plan",
                "final_error")


@dataclass(frozen=True)
class ResultRow:
    """One (sequence, algorithm) outcome; ``seed`` is None for seed-averaged rows.

    ``errors`` is the lower-triangular error matrix flattened row-major.
    """

    seq_id: int
    algorithm: str
    setting: str
    tasks: str
    total_complexity: float
    seq_heterogeneity: float
    plan: str
    final_error: float
    errors: tuple[float, ...]
    seed: int | None = None

    def __post_init__(self):
        k = len(self.tasks.split("|"))
        if len(self.errors) != k * (k + 1) // 2:
            raise ValueError(f"{k} tasks need {k * (k + 1) // 2} error entries, got {len(self.errors)}")
        last = self.errors[-k:]
        if abs(sum(last) / k - self.final_error) > 1e-12:
            raise ValueError("final_error must equal the mean of the last row of the error matrix")

    @property
    def k(self) -> int:
        return len(self.tasks.split("|"))

    @property
    def plan_kind(self) -> str:
        return self.plan.split(":", 1)[0]

    def matrix(self) -> list[list[float]]:
        out, pos = [], 0
        for i in range(self.k):
            out.append(list(self.errors[pos:pos + i + 1]))
            pos += i + 1
        return out


def error_columns(k: int) -> list[str]:
    return [f"err_{i}_{j}" for i in range(k) for j in range(i + 1)]


def _fmt(x: float) -> str:
    return format(x, ".17g")


def write_results_csv(rows, path):
    rows = list(rows)
    if not rows:
        raise ValueError("no result rows to write")
    per_seed = any(r.seed is not None for r in rows)
    k_max = max(r.k for r in rows)
    header = list(BASE_COLUMNS)
    if per_seed:
        header.insert(2, "seed")
    header += error_columns(k_max)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            line = [str(r.seq_id), r.algorithm, r.setting, r.tasks, _fmt(r.total_complexity),
                    _fmt(r.seq_heterogeneity), r.plan, _fmt(r.final_error)]
            if per_seed:
                line.insert(2, "" if r.seed is None else str(r.seed))
            line += [_fmt(e) for e in r.errors] + [""] * (len(error_columns(k_max)) - len(r.errors))
            w.writerow(line)


def read_results_csv(path) -> list[ResultRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in BASE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = []
        for rec in reader:
            k = len(rec["tasks"].split("|"))
            errors = tuple(float(rec[c]) for c in error_columns(k))
            seed = rec.get("seed")
            rows.append(ResultRow(
                seq_id=int(rec["seq_id"]), algorithm=rec["algorithm"], setting=rec["setting"], tasks=rec["tasks"],
                total_complexity=float(rec["total_complexity"]), seq_heterogeneity=float(rec["seq_heterogeneity"]),
                plan=rec["plan"], final_error=float(rec["final_error"]), errors=errors,
                seed=int(seed) if seed not in (None, "") else None,
            ))
    return rows


def mean_row(rows: list[ResultRow]) -> ResultRow:
    """Average per-seed rows of one (sequence, algorithm) entrywise."""
    first = rows[0]
    if any((r.seq_id, r.algorithm, r.tasks) != (first.seq_id, first.algorithm, first.tasks) for r in rows):
        raise ValueError("rows to average must share sequence and algorithm")
    n = len(rows)
    errors = tuple(math.fsum(r.errors[i] for r in rows) / n for i in range(len(first.errors)))
    k = first.k
    final = math.fsum(errors[-k:]) / k
    return ResultRow(first.seq_id, first.algorithm, first.setting, first.tasks, first.total_complexity,
                     first.seq_heterogeneity, first.plan, final, errors, None)
