import numpy as np
import pytest

from taskseq import nn
from taskseq.continual import (
    ALGORITHMS,
    Coreset,
    RunConfig,
    RunRecord,
    final_hardness,
    run_rng,
    run_sequence,
    select_coreset,
)
from taskseq.data import LabeledDataset, TaskData, TaskSequence, UnitTask


def separable_tasks(k=5, width=12, n=300, seed=0):
    """k binary tasks, each labelled by a random hyperplane with a margin."""
    rng = np.random.default_rng(seed)
    tasks = {}
    for t in range(k):
        w = rng.normal(size=width)
        w /= np.linalg.norm(w)
        parts = []
        for size in (n, n // 2):
            x = rng.normal(size=(size, width))
            y = (x @ w > 0).astype(np.int64)
            x += np.outer(np.where(y == 1, 0.5, -0.5), w)
            parts.append(LabeledDataset(x, y, 2))
        task = UnitTask(t, t + 1)
        tasks[task] = TaskData(parts[0], parts[1], task)
    return TaskSequence(tuple(tasks)), tasks


SMALL = dict(layer_sizes=(12, 16), mc_eval=30)
CONFIGS = {
    "si": RunConfig(**SMALL, epochs=10, batch_size=32, learning_rate=0.01),
    "finetune": RunConfig(**SMALL, epochs=10, batch_size=32, learning_rate=0.01, si_c=0.0),
    "vcl": RunConfig(**SMALL, epochs=150, batch_size=None, learning_rate=0.02),
    "coreset_vcl": RunConfig(**SMALL, epochs=150, batch_size=None, learning_rate=0.02, coreset_size=20),
}


class TestRecords:
    def test_final_hardness(self):
        seq = TaskSequence.parse("0/1|0/2|0/3")
        rec = RunRecord(seq, ((0.5,), (0.1, 0.1), (0.1, 0.2, 0.3)), "si", 0)
        assert final_hardness(rec) == pytest.approx(0.2, abs=1e-15)
        single = RunRecord(TaskSequence.parse("0/1"), ((0.25,),), "si", 0)
        assert final_hardness(single) == 0.25

    def test_incomplete(self):
        rec = RunRecord(TaskSequence.parse("0/1|0/2"), ((0.5,),), "si", 0)
        with pytest.raises(ValueError):
            final_hardness(rec)

    def test_shape_and_range(self):
        seq = TaskSequence.parse("0/1|0/2")
        with pytest.raises(ValueError):
            RunRecord(seq, ((0.1, 0.2), (0.1, 0.2)), "si", 0)
        with pytest.raises(ValueError):
            RunRecord(seq, ((1.5,),), "si", 0)


class TestCoreset:
    def setup_method(self):
        self.seq, self.tasks = separable_tasks(k=1, n=50)
        self.task = self.tasks[self.seq.tasks[0]]

    def test_empty(self):
        (cx, cy), rest = select_coreset(self.task, 0, 1)
        assert len(cy) == 0 and len(rest.train) == 50

    def test_full(self):
        (cx, cy), rest = select_coreset(self.task, 50, 1)
        assert len(cy) == 50 and rest is None

    def test_disjoint_and_deterministic(self):
        (cx, cy), rest = select_coreset(self.task, 10, 7)
        (cx2, _), _ = select_coreset(self.task, 10, 7)
        np.testing.assert_array_equal(cx, cx2)
        rows = {tuple(r) for r in rest.train.inputs}
        assert not any(tuple(r) in rows for r in cx)
        assert len(rest.train) + len(cy) == 50

    def test_too_large(self):
        with pytest.raises(ValueError):
            select_coreset(self.task, 51, 0)

    def test_capacity(self):
        c = Coreset(2)
        with pytest.raises(ValueError):
            c.add("t", np.zeros((3, 2)), np.zeros(3))


class TestRunSequence:
    @pytest.mark.parametrize("algorithm", ["si", "vcl", "coreset_vcl"])
    def test_separable_tasks_are_learned(self, algorithm):
        seq, tasks = separable_tasks()
        rec = run_sequence(algorithm, seq, tasks, CONFIGS[algorithm], seed=0)
        assert rec.complete
        assert max(e for row in rec.errors for e in row) < 0.05

    @pytest.mark.parametrize("algorithm", ALGORITHMS)
    def test_error_matrix_shape(self, algorithm):
        seq, tasks = separable_tasks(k=3, n=60)
        cfg = CONFIGS[algorithm]
        rec = run_sequence(algorithm, seq, tasks, RunConfig(**{**cfg.__dict__, "epochs": 2}), seed=1)
        assert [len(r) for r in rec.errors] == [1, 2, 3]
        assert all(0.0 <= e <= 1.0 for r in rec.errors for e in r)

    @pytest.mark.parametrize("algorithm", ALGORITHMS)
    def test_deterministic(self, algorithm):
        seq, tasks = separable_tasks(k=2, n=60)
        cfg = RunConfig(**{**CONFIGS[algorithm].__dict__, "epochs": 3})
        a = run_sequence(algorithm, seq, tasks, cfg, seed=4, seq_index=2)
        b = run_sequence(algorithm, seq, tasks, cfg, seed=4, seq_index=2)
        assert a == b

    def test_single_task_equals_plain_training(self):
        seq, tasks = separable_tasks(k=1)
        cfg = CONFIGS["si"]
        rec = run_sequence("si", seq, tasks, cfg, seed=3, seq_index=5)
        rng = run_rng(3, 5)
        net = nn.MultiHeadNet.create(cfg.layer_sizes, rng)
        head = seq.tasks[0].name
        net.add_head(head, rng)
        data = tasks[seq.tasks[0]]
        nn.train_epochs(net, data.train.inputs, data.train.labels, head, cfg.epochs, cfg.batch_size, rng,
                        cfg.optimizer)
        assert rec.errors[0][0] == nn.error_rate(nn.dense_forward(net, data.test.inputs, head), data.test.labels)

    def test_si_without_penalty_is_finetuning(self):
        seq, tasks = separable_tasks(k=3, n=100)
        cfg = RunConfig(**{**CONFIGS["si"].__dict__, "si_c": 0.0})
        _, si_net = run_sequence("si", seq, tasks, cfg, seed=2, return_model=True)
        _, ft_net = run_sequence("finetune", seq, tasks, cfg, seed=2, return_model=True)
        for a, b in zip(si_net.all_blocks(), ft_net.all_blocks()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_penalty_changes_the_trunk(self):
        seq, tasks = separable_tasks(k=2, n=100)
        _, si_net = run_sequence("si", seq, tasks, CONFIGS["si"], seed=2, return_model=True)
        _, ft_net = run_sequence("finetune", seq, tasks, CONFIGS["si"], seed=2, return_model=True)
        assert not np.array_equal(si_net.trunk[0].weight.value, ft_net.trunk[0].weight.value)

    def test_unmaterialized_task(self):
        seq, tasks = separable_tasks(k=2, n=40)
        del tasks[seq.tasks[1]]
        with pytest.raises(KeyError):
            run_sequence("si", seq, tasks, CONFIGS["si"], seed=0)

    def test_unknown_algorithm(self):
        seq, tasks = separable_tasks(k=1, n=40)
        with pytest.raises(ValueError):
            run_sequence("ewc", seq, tasks, CONFIGS["si"], seed=0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_signalled(self):
        seq, tasks = separable_tasks(k=1, n=40)
        bad = dict(tasks)
        t = seq.tasks[0]
        x = bad[t].train.inputs.copy()
        x[0, 0] = np.inf
        bad[t] = TaskData(LabeledDataset(x, bad[t].train.labels.copy(), 2), bad[t].test, t)
        with pytest.raises(nn.DivergenceError):
            run_sequence("si", seq, bad, CONFIGS["si"], seed=0)
