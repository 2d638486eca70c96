import json
import math
import os

import pytest
from conftest import needs_mnist

from taskseq import experiment as X
from taskseq.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, main
from taskseq.config import load_config
from taskseq.nn import DivergenceError
from taskseq.results import read_results_csv

pytestmark = [needs_mnist, pytest.mark.slow]

TINY = {
    "data": {"mnist_dir": "$MNIST_DIR", "cap_per_label": 60, "test_cap_per_label": 40},
    "setting": "mnist-20",
    "algorithms": ["si", "vcl", "coreset_vcl"],
    "plans": [
        {"kind": "random", "n": 3, "k": 3, "seed": 5},
        {"kind": "permutations", "base": ["0/1", "2/3", "4/5"], "n": 3},
        {"kind": "greedy", "start": "0/1", "k": 2, "directions": ["highest"], "algorithms": ["si"]},
    ],
    "seeds": [0, 1],
    "hyperparameters": {
        "si": {"epochs": 1},
        "vcl": {"epochs": 2, "mc_eval": 5},
        "coreset_vcl": {"epochs": 2, "mc_eval": 5, "coreset_size": 10},
    },
    "probe": {"epochs": 1, "cap_per_label": 100},
    "embed": {"trivial_size": 400},
    "out_dir": "out",
}


def write_config(tmp_path, **changes):
    raw = json.loads(json.dumps(TINY))
    raw.update(changes)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return str(path)


def outputs(out_dir):
    names = ["results.csv", "runs.csv", "report.txt"]
    files = {n: open(os.path.join(out_dir, n), "rb").read() for n in names}
    fig = os.path.join(out_dir, "figures")
    for n in sorted(os.listdir(fig)):
        files["figures/" + n] = open(os.path.join(fig, n), "rb").read()
    return files


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    """The tiny experiment twice: once in-process, once with two workers."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    dirs = []
    for jobs in (1, 2):
        out = str(tmp / f"jobs{jobs}")
        assert main(["run", "--config", cfg, "--out-dir", out, "--jobs", str(jobs), "-q"]) == EXIT_OK
        assert main(["report", "--config", cfg, "--out-dir", out, "-q"]) == EXIT_OK
        dirs.append(out)
    return cfg, dirs


class TestEndToEnd:
    def test_byte_identical_across_jobs(self, two_runs):
        _, (a, b) = two_runs
        fa, fb = outputs(a), outputs(b)
        assert sorted(fa) == sorted(fb)
        assert any(n.endswith(".svg") for n in fa)
        for name in fa:
            assert fa[name] == fb[name], name

    def test_rerun_uses_cache_and_matches(self, two_runs, capsys):
        cfg, (a, _) = two_runs
        before = open(os.path.join(a, "results.csv"), "rb").read()
        assert main(["run", "--config", cfg, "--out-dir", a, "-q"]) == EXIT_OK
        assert open(os.path.join(a, "results.csv"), "rb").read() == before

    def test_row_conservation(self, two_runs):
        cfg, (a, _) = two_runs
        rows = read_results_csv(os.path.join(a, "results.csv"))
        seeds = read_results_csv(os.path.join(a, "runs.csv"))
        # 3 random + 3 permutations for three algorithms, one greedy sequence for SI
        assert len(rows) == 6 * 3 + 1
        assert len(seeds) == 2 * len(rows)
        manifest = json.load(open(os.path.join(a, "manifest.json")))
        assert manifest["runs"] == len(seeds) and manifest["diverged_runs"] == []

    def test_seed_rows_average_to_results(self, two_runs):
        _, (a, _) = two_runs
        rows = read_results_csv(os.path.join(a, "results.csv"))
        seeds = read_results_csv(os.path.join(a, "runs.csv"))
        for r in rows:
            group = [s for s in seeds if (s.seq_id, s.algorithm) == (r.seq_id, r.algorithm)]
            assert len(group) == 2
            assert r.final_error == pytest.approx(math.fsum(s.final_error for s in group) / 2, abs=1e-12)
            assert 0.0 <= r.final_error <= 1.0

    def test_report_has_every_column(self, two_runs):
        _, (a, _) = two_runs
        text = open(os.path.join(a, "report.txt")).read()
        for algo in ("si", "vcl", "coreset_vcl"):
            assert f"{algo} (mnist-20)" in text
        assert "greedy:highest" in text

    def test_dry_run_counts(self, two_runs, capsys):
        cfg, (a, _) = two_runs
        assert main(["run", "--config", cfg, "--out-dir", a, "--dry-run"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "7 sequences, 2 seeds, 38 runs" in out

    def test_embed_and_sequences(self, two_runs):
        cfg, (a, _) = two_runs
        assert main(["embed", "--config", cfg, "--out-dir", a, "-q"]) == EXIT_OK
        lines = open(os.path.join(a, "task_complexity.csv")).read().splitlines()
        assert lines[0] == "task,complexity,embedding_norm" and len(lines) == 46
        assert main(["sequences", "--config", cfg, "--out-dir", a, "-q"]) == EXIT_OK
        assert len(open(os.path.join(a, "sequences.csv")).read().splitlines()) == 8


class TestExitCodes:
    def test_config_error(self, tmp_path):
        path = write_config(tmp_path, setting="mnist-999")
        assert main(["run", "--config", path]) == EXIT_CONFIG

    def test_unknown_key(self, tmp_path):
        path = write_config(tmp_path, colour="blue")
        assert main(["run", "--config", path, "--dry-run"]) == EXIT_CONFIG

    def test_bad_jobs(self, tmp_path):
        assert main(["run", "--config", write_config(tmp_path), "--jobs", "0"]) == EXIT_CONFIG

    def test_missing_data(self, tmp_path):
        raw = dict(TINY["data"], mnist_dir=str(tmp_path / "nowhere"))
        path = write_config(tmp_path, data=raw)
        assert main(["run", "--config", path, "--dry-run"]) == EXIT_DATA

    def test_missing_results(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["correlate", "--config", path, "--out-dir", str(tmp_path / "empty")]) == EXIT_DATA

    def test_divergence_beyond_threshold(self, tmp_path, monkeypatch):
        real = X.run_sequence

        def flaky(algorithm, sequence, tasks, config, seed, seq_index=0, **kw):
            if algorithm == "si" and seed == 1:
                raise DivergenceError("non-finite gradient")
            return real(algorithm, sequence, tasks, config, seed, seq_index=seq_index, **kw)

        monkeypatch.setattr(X, "run_sequence", flaky)
        plans = [{"kind": "random", "n": 2, "k": 2, "seed": 3}]
        path = write_config(tmp_path, plans=plans, algorithms=["si"], divergence_threshold=0.1)
        out = str(tmp_path / "out")
        assert main(["run", "--config", path, "--out-dir", out, "-q"]) == EXIT_DIVERGED
        # every SI row had a divergent seed, so nothing is written
        assert not os.path.exists(os.path.join(out, "results.csv"))

    def test_partial_divergence_excludes_rows(self, tmp_path, monkeypatch):
        real = X.run_sequence

        def flaky(algorithm, sequence, tasks, config, seed, seq_index=0, **kw):
            if seq_index == 0 and seed == 1:
                raise DivergenceError("non-finite gradient")
            return real(algorithm, sequence, tasks, config, seed, seq_index=seq_index, **kw)

        monkeypatch.setattr(X, "run_sequence", flaky)
        plans = [{"kind": "random", "n": 4, "k": 2, "seed": 3}]
        path = write_config(tmp_path, plans=plans, algorithms=["si"], divergence_threshold=0.5)
        out = str(tmp_path / "out")
        assert main(["run", "--config", path, "--out-dir", out, "-q"]) == EXIT_OK
        rows = read_results_csv(os.path.join(out, "results.csv"))
        assert sorted(r.seq_id for r in rows) == [1, 2, 3]
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["diverged_runs"] == [{"seq_id": 0, "algorithm": "si", "seed": 1}]
        assert main(["correlate", "--config", path, "--out-dir", out, "-q"]) == EXIT_OK
        assert "divergent runs excluded: 1" in open(os.path.join(out, "report.txt")).read()


class TestSeedOffset:
    def test_offset_shifts_seeds(self, tmp_path, capsys):
        path = write_config(tmp_path, plans=[{"kind": "random", "n": 2, "k": 2}])
        assert main(["run", "--config", path, "--seed-offset", "10", "--dry-run"]) == EXIT_OK
        assert "2 seeds" in capsys.readouterr().out
        cfg = load_config(path)
        assert cfg.seeds == (0, 1)
