import os

import numpy as np
import pytest

os.environ.setdefault("MNIST_DIR", "/root/data/mnist")

from taskseq.data import load_idx, mnist_paths  # noqa: E402


def mnist_available() -> bool:
    return all(os.path.exists(p) for p in mnist_paths(os.environ["MNIST_DIR"]).values())


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST IDX files not found under $MNIST_DIR")


@pytest.fixture(scope="session")
def mnist():
    if not mnist_available():
        pytest.skip("MNIST IDX files not found under $MNIST_DIR")
    p = mnist_paths(os.environ["MNIST_DIR"])
    return (load_idx(p["train_images"], p["train_labels"], 10),
            load_idx(p["test_images"], p["test_labels"], 10))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def probe(mnist):
    from taskseq.embed import ProbeConfig, train_probe

    return train_probe(mnist[0], ProbeConfig(), seed=0)


@pytest.fixture(scope="session")
def mnist_tasks(mnist):
    from taskseq.config import parse_config
    from taskseq.experiment import TaskStore

    cfg = parse_config({"data": {"mnist_dir": os.environ["MNIST_DIR"]}})
    return TaskStore(*mnist, cfg)


@pytest.fixture(scope="session")
def embedding_table(probe, mnist, mnist_tasks):
    from taskseq.embed import embed_all

    return embed_all(probe, mnist_tasks, mnist[0].inputs)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one (status, criterion, detail) line per acceptance criterion."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in lines:
        terminalreporter.write_line(f"{status:4s}  {name}: {detail}")
