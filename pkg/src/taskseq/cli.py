"""Command-line entry point: ``taskseq <command> --config PATH``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import experiment as X
from . import report as R
from .config import ConfigError, load_config
from .data import DataFormatError
from .nn import DivergenceError
from .results import read_results_csv, write_results_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--out-dir", help="override the output directory")
    p.add_argument("--jobs", type=int, help="parallel training processes")
    p.add_argument("--seed-offset", type=int, default=0, help="add N to every seed")
    p.add_argument("--dry-run", action="store_true", help="list the work without training")
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskseq", description="Task-sequence properties versus forgetting.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "probe": "train (or load) the probe network",
        "embed": "embed every unit task and write task complexities",
        "sequences": "write the planned sequences with their properties",
        "run": "train every (sequence, algorithm, seed) and write results",
        "correlate": "print the correlation tables from written results",
        "plot": "render SVG figures from written results",
        "report": "tables and figures from written results",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text))
    return parser


def _resolve(args):
    cfg = load_config(args.config)
    over = {}
    if args.out_dir:
        over["out_dir"] = os.path.abspath(args.out_dir)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        over["jobs"] = args.jobs
    if args.seed_offset:
        over["seeds"] = tuple(s + args.seed_offset for s in cfg.seeds)
        if min(over["seeds"]) < 0:
            raise ConfigError("--seed-offset makes a seed negative")
    return cfg.with_overrides(**over) if over else cfg


def _write_json(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _probe_and_table(cfg):
    train, test = X.load_mnist(cfg)
    probe = X.prepare_probe(cfg, train)
    tasks = X.materialize_all(train, test, cfg)
    return train, probe, X.prepare_embeddings(cfg, train, tasks, probe)


def cmd_probe(cfg, args):
    if args.dry_run:
        print(f"would train a probe with hidden widths {list(cfg.probe.hidden)} (seed {cfg.probe_seed})")
        return EXIT_OK
    train, _ = X.load_mnist(cfg)
    probe = X.prepare_probe(cfg, train)
    print(f"probe {probe.identifier}: units={probe.unit_count} train_error={probe.meta['train_error']:.4f}")
    return EXIT_OK


def cmd_embed(cfg, args):
    if args.dry_run:
        print("would embed 45 unit tasks and the trivial task")
        return EXIT_OK
    _, probe, table = _probe_and_table(cfg)
    path = os.path.join(cfg.out_dir, "task_complexity.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["task", "complexity", "embedding_norm"])
        for name, cx, norm in X.complexity_rows(table):
            w.writerow([name, format(cx, ".17g"), format(norm, ".17g")])
    print(f"probe {probe.identifier}: wrote {path}")
    return EXIT_OK


def cmd_sequences(cfg, args):
    train, test = X.load_mnist(cfg)
    from .data import make_unit_tasks

    unit_tasks = make_unit_tasks(train)
    table = None
    if not args.dry_run or any(p.kind == "greedy" for p in cfg.plans):
        _, _, table = _probe_and_table(cfg)
    planned = X.build_sequences(cfg, table, unit_tasks)
    if args.dry_run:
        for p in planned:
            print(f"{p.seq_id},{p.plan},{p.sequence}")
        return EXIT_OK
    from .embed import sequential_heterogeneity, total_complexity

    path = os.path.join(cfg.out_dir, "sequences.csv")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seq_id", "plan", "tasks", "total_complexity", "seq_heterogeneity"])
        for p in planned:
            w.writerow([p.seq_id, p.plan, str(p.sequence), format(total_complexity(p.sequence, table), ".17g"),
                        format(sequential_heterogeneity(p.sequence, table), ".17g")])
    print(f"wrote {len(planned)} sequences to {path}")
    return EXIT_OK


def cmd_run(cfg, args):
    if args.dry_run:
        planned, specs = X.orchestrate_experiment(cfg, dry_run=True)
        per_algo = {}
        for s in specs:
            per_algo[s.algorithm] = per_algo.get(s.algorithm, 0) + 1
        print(f"{len(planned)} sequences, {len(cfg.seeds)} seeds, {len(specs)} runs")
        for algo in sorted(per_algo):
            print(f"  {algo}: {per_algo[algo]} runs")
        return EXIT_OK
    result = X.orchestrate_experiment(cfg)
    if not result.rows:
        print("every (sequence, algorithm) pair diverged; nothing to write", file=sys.stderr)
        return EXIT_DIVERGED
    write_results_csv(result.rows, os.path.join(cfg.out_dir, "results.csv"))
    if result.seed_rows:
        write_results_csv(result.seed_rows, os.path.join(cfg.out_dir, "runs.csv"))
    train, _ = X.load_mnist(cfg)
    probe_id = X.E.probe_identifier(train, cfg.probe, cfg.probe_seed)
    _write_json(os.path.join(cfg.out_dir, "manifest.json"), X.experiment_manifest(cfg, result, probe_id))
    print(f"{result.n_runs} runs, {len(result.rows)} rows written to {cfg.out_dir}; "
          f"{len(result.diverged)} diverged")
    if result.divergence_fraction > cfg.divergence_threshold:
        print(f"divergence fraction {result.divergence_fraction:.3f} exceeds {cfg.divergence_threshold}",
              file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _load_rows(cfg):
    path = os.path.join(cfg.out_dir, "results.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no results at {path}; run 'taskseq run' first")
    rows = read_results_csv(path)
    manifest = os.path.join(cfg.out_dir, "manifest.json")
    diverged = None
    if os.path.exists(manifest):
        with open(manifest) as f:
            diverged = len(json.load(f).get("diverged_runs", []))
    return rows, diverged


def cmd_correlate(cfg, args):
    rows, diverged = _load_rows(cfg)
    text = R.report_tables(rows, diverged)
    greedy = R.greedy_summary(rows)
    if greedy:
        text += "\nGreedy extreme-complexity sequences\n" + greedy
    if not args.dry_run:
        with open(os.path.join(cfg.out_dir, "report.txt"), "w") as f:
            f.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_plot(cfg, args):
    rows, _ = _load_rows(cfg)
    if args.dry_run:
        print("would write figures to", os.path.join(cfg.out_dir, "figures"))
        return EXIT_OK
    for path in R.render_all(rows, os.path.join(cfg.out_dir, "figures")):
        print(path)
    return EXIT_OK


def cmd_report(cfg, args):
    code = cmd_correlate(cfg, args)
    return code or cmd_plot(cfg, args)


COMMANDS = {"probe": cmd_probe, "embed": cmd_embed, "sequences": cmd_sequences, "run": cmd_run,
            "correlate": cmd_correlate, "plot": cmd_plot, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
