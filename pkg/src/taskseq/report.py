"""Correlation tables and SVG figures built from result rows."""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .results import ResultRow  # noqa: E402
from .stats import CorrelationResult, PairedSample, correlate, linear_fit_with_ci  # noqa: E402

PROPERTIES = {
    "total_complexity": "total complexity",
    "seq_heterogeneity": "sequential heterogeneity",
}
TABLE_ROWS = (
    ("a", "total_complexity", ("random", "explicit")),
    ("b", "seq_heterogeneity", ("random", "explicit")),
    ("c", "seq_heterogeneity", ("permutations",)),
)
ROW_TITLES = {
    "a": "(a) error vs total complexity",
    "b": "(b) error vs sequential heterogeneity",
    "c": "(c) error vs normalized sequential heterogeneity",
}
GREEN, RED, BLACK = "#1a9850", "#d73027", "#000000"

_SVG_RC = {
    "svg.hashsalt": "taskseq",
    "svg.fonttype": "none",
    "path.simplify": False,
    "font.family": "DejaVu Sans",
    "font.size": 9,
}


@dataclass(frozen=True)
class Cell:
    algorithm: str
    setting: str
    key: str
    result: CorrelationResult | None
    m: int

    def render(self) -> str:
        if self.result is None:
            return "n/a"
        r, p = self.result.r, self.result.p
        ptxt = "p<0.01" if p < 0.01 else f"p={p:.2f}"
        mark = "*" if p < 0.05 else ""
        return f"{r:.2f} ({ptxt}){mark}"


def _pairs(rows, prop: str) -> tuple[np.ndarray, np.ndarray]:
    xs = np.array([getattr(r, prop) for r in rows], dtype=np.float64)
    ys = np.array([r.final_error for r in rows], dtype=np.float64)
    return xs, ys


def _normalized_pairs(rows) -> tuple[np.ndarray, np.ndarray]:
    """Heterogeneity and error centred within each permuted task set.

    Orderings of one task set share their total complexity, so centring
    per set leaves only the effect of the order.
    """
    groups: dict[frozenset, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault(frozenset(r.tasks.split("|")), []).append(r)
    if len(groups) == 1:
        return _pairs(rows, "seq_heterogeneity")
    xs, ys = [], []
    for key in sorted(groups, key=lambda g: sorted(g)):
        gx, gy = _pairs(groups[key], "seq_heterogeneity")
        xs.append(gx - gx.mean())
        ys.append(gy - gy.mean())
    return np.concatenate(xs), np.concatenate(ys)


def correlation_cell(rows, algorithm: str, setting: str, key: str) -> Cell:
    _, prop, kinds = next(t for t in TABLE_ROWS if t[0] == key)
    chosen = [r for r in rows if r.algorithm == algorithm and r.setting == setting and r.plan_kind in kinds]
    if len(chosen) < 3:
        return Cell(algorithm, setting, key, None, len(chosen))
    xs, ys = _normalized_pairs(chosen) if key == "c" else _pairs(chosen, prop)
    try:
        res = correlate(PairedSample(xs, ys))
    except ValueError:
        res = None
    return Cell(algorithm, setting, key, res, len(chosen))


def table_columns(rows) -> list[tuple[str, str]]:
    return sorted({(r.algorithm, r.setting) for r in rows}, key=lambda c: (c[1], c[0]))


def report_cells(rows) -> list[Cell]:
    rows = list(rows)
    return [correlation_cell(rows, a, s, key) for a, s in table_columns(rows) for key, _, _ in TABLE_ROWS]


def report_tables(rows, diverged: int | None = None) -> str:
    """Plain-text table: one column per (algorithm, setting), one line per property."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to report")
    cols = table_columns(rows)
    cells = {(c.algorithm, c.setting, c.key): c for c in report_cells(rows)}
    head = ["property"] + [f"{a} ({s})" for a, s in cols]
    body = []
    for key, _, _ in TABLE_ROWS:
        body.append([ROW_TITLES[key]] + [cells[(a, s, key)].render() for a, s in cols])
    counts = ["rows (a/b | c)"] + [f"{cells[(a, s, 'a')].m} | {cells[(a, s, 'c')].m}" for a, s in cols]
    widths = [max(len(line[i]) for line in [head, *body, counts]) for i in range(len(head))]

    def fmt(line):
        return "  ".join(text.ljust(w) for text, w in zip(line, widths)).rstrip()

    out = ["Correlation between final average error and sequence properties",
           "r (p-value); * marks p < 0.05", "", fmt(head), fmt(["-" * w for w in widths])]
    out += [fmt(line) for line in body] + [fmt(counts)]
    if diverged is not None:
        out += ["", f"divergent runs excluded: {diverged}"]
    return "\n".join(out) + "\n"


# --- figures -----------------------------------------------------------------


def significance_color(res: CorrelationResult | None) -> str:
    if res is None or res.p >= 0.05:
        return BLACK
    return GREEN if res.r > 0 else RED


def _save_svg(fig, path):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(buf.getvalue())


def render_scatter_svg(rows, x: str, path, title: str | None = None, normalized: bool = False):
    """Scatter of (property, final error) with the OLS line and its 95% band."""
    rows = list(rows)
    if len(rows) < 3:
        raise ValueError("a scatter plot needs at least three rows")
    if x not in PROPERTIES:
        raise ValueError(f"unknown property {x!r}; choose from {', '.join(PROPERTIES)}")
    xs, ys = _normalized_pairs(rows) if normalized else _pairs(rows, x)
    sample = PairedSample(xs, ys)
    try:
        res = correlate(sample)
    except ValueError:
        res = None
    color = significance_color(res)
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        span = xs.max() - xs.min()
        if span > 0:
            fit = linear_fit_with_ci(sample)
            grid = np.linspace(xs.min(), xs.max(), 101)
            mid, half = fit.predict(grid), fit.band(grid)
            band = ax.fill_between(grid, mid - half, mid + half, color=color, alpha=0.2, linewidth=0)
            band.set_gid("confidence-band")
            (line,) = ax.plot(grid, mid, color=color, linewidth=1.5)
            line.set_gid("regression-line")
        pts = ax.scatter(xs, ys, s=12, color=color, alpha=0.8, linewidths=0)
        pts.set_gid("points")
        label = PROPERTIES[x] + (" (centred per task set)" if normalized else "")
        ax.set_xlabel(label)
        ax.set_ylabel("final average error")
        stat = "r = n/a" if res is None else f"r = {res.r:.2f}, p = {res.p:.2g}"
        ax.set_title(f"{title}\n{stat}" if title else stat)
        fig.tight_layout()
        _save_svg(fig, path)
    return res


def running_average(row: ResultRow) -> list[float]:
    """Average error over the tasks seen so far, after each task."""
    return [math.fsum(r) / len(r) for r in row.matrix()]


def render_trajectory_svg(rows, path, title: str | None = None):
    """Average error over seen tasks after each task, one line per row."""
    rows = list(rows)
    if not rows:
        raise ValueError("nothing to plot")
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(4.4, 3.2))
        for i, r in enumerate(rows):
            traj = running_average(r)
            (line,) = ax.plot(range(1, len(traj) + 1), traj, marker="o", markersize=3,
                              label=f"{r.algorithm} {r.plan.split(':')[-1]} C={r.total_complexity:.2f}")
            line.set_gid(f"trajectory-{i}")
        ax.set_xlabel("tasks trained")
        ax.set_ylabel("average error on seen tasks")
        ax.legend(fontsize=7)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save_svg(fig, path)


def render_all(rows, out_dir) -> list[str]:
    """Write every scatter plot (one per cell) and any greedy trajectories; returns the paths."""
    rows = list(rows)
    written = []
    for algo, setting in table_columns(rows):
        for key, prop, kinds in TABLE_ROWS:
            chosen = [r for r in rows if r.algorithm == algo and r.setting == setting and r.plan_kind in kinds]
            if len(chosen) < 3:
                continue
            path = os.path.join(out_dir, f"scatter_{setting}_{algo}_{key}.svg")
            render_scatter_svg(chosen, prop, path, f"{algo} {setting} {ROW_TITLES[key][:3]}", normalized=key == "c")
            written.append(path)
        greedy = [r for r in rows if r.algorithm == algo and r.setting == setting and r.plan_kind == "greedy"]
        if greedy:
            path = os.path.join(out_dir, f"trajectory_{setting}_{algo}_greedy.svg")
            render_trajectory_svg(greedy, path, f"{algo} {setting}: greedy sequences")
            written.append(path)
    return written


def greedy_summary(rows) -> str:
    """Final error of each greedy sequence per algorithm."""
    lines = []
    for r in sorted((r for r in rows if r.plan_kind == "greedy"), key=lambda r: (r.algorithm, r.plan)):
        lines.append(f"{r.algorithm:12s} {r.plan:22s} {r.tasks:28s} C={r.total_complexity:.4f} "
                     f"error={r.final_error:.4f}")
    return "\n".join(lines) + ("\n" if lines else "")
