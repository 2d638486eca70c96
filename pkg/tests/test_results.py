import numpy as np
import pytest

from taskseq.results import ResultRow, error_columns, mean_row, read_results_csv, write_results_csv


def row(seq_id=0, algo="si", errors=(0.1, 0.2, 0.3), tasks="0/1|2/3", seed=None, cx=1.0 / 3, het=0.1):
    k = len(tasks.split("|"))
    final = sum(errors[-k:]) / k
    return ResultRow(seq_id, algo, "mnist-20", tasks, cx, het, "random", final, tuple(errors), seed)


class TestResultRow:
    def test_final_error_consistency(self):
        with pytest.raises(ValueError):
            ResultRow(0, "si", "mnist-20", "0/1", 0.5, 0.0, "random", 0.3, (0.2,))
        with pytest.raises(ValueError):
            ResultRow(0, "si", "mnist-20", "0/1|2/3", 0.5, 0.0, "random", 0.2, (0.2,))

    def test_matrix(self):
        assert row().matrix() == [[0.1], [0.2, 0.3]]
        assert error_columns(3) == ["err_0_0", "err_1_0", "err_1_1", "err_2_0", "err_2_1", "err_2_2"]

    def test_mean_row(self):
        a = row(errors=(0.1, 0.2, 0.4), seed=0)
        b = row(errors=(0.3, 0.1, 0.1), seed=1)
        m = mean_row([a, b])
        assert m.seed is None
        assert m.final_error == pytest.approx((a.final_error + b.final_error) / 2, abs=1e-12)
        with pytest.raises(ValueError):
            mean_row([a, row(seq_id=1)])


class TestCsv:
    def test_one_row_file(self, tmp_path):
        path = tmp_path / "r.csv"
        write_results_csv([row()], path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert lines[0] == ("seq_id,algorithm,setting,tasks,total_complexity,seq_heterogeneity,plan,final_error,"
                            "err_0_0,err_1_0,err_1_1")

    def test_round_trip_exact(self, tmp_path, rng):
        rows = []
        for i in range(20):
            e = tuple(rng.uniform(0, 1, 6))
            rows.append(row(seq_id=i, errors=e, tasks="0/1|2/3|4/5", cx=rng.uniform(), het=rng.uniform() * 1e-7))
        path = tmp_path / "r.csv"
        write_results_csv(rows, path)
        assert read_results_csv(path) == rows

    def test_per_seed_rows_and_mixed_lengths(self, tmp_path):
        rows = [row(seed=3), row(seq_id=1, tasks="0/1", errors=(0.25,), seed=4)]
        path = tmp_path / "r.csv"
        write_results_csv(rows, path)
        assert path.read_text().splitlines()[0].startswith("seq_id,algorithm,seed,setting")
        assert read_results_csv(path) == rows

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            write_results_csv([], tmp_path / "r.csv")

    def test_seventeen_digits(self, tmp_path):
        path = tmp_path / "r.csv"
        write_results_csv([row(cx=0.1)], path)
        assert "0.10000000000000001" in path.read_text()
        assert np.float64(float("0.10000000000000001")) == 0.1
