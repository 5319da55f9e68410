import numpy as np
import pytest

from basisprune import model as mdl
from basisprune.numkit import RngStream


def random_model(sizes, seed, aux_rank=0, activation="tanh"):
    return mdl.init_mlp(sizes, RngStream(seed, 1), aux_rank, activation)


def random_batch(d, classes, size, seed, soft=False):
    rng = RngStream(seed, 2)
    x = rng.normal((size, d))
    if soft:
        t = np.exp(rng.normal((size, classes)))
        return mdl.Batch(x, t / t.sum(1, keepdims=True))
    return mdl.Batch.from_labels(x, rng.integers(0, classes, size), classes)


@pytest.fixture
def toy_model():
    return random_model([4, 6, 5, 3], seed=11, aux_rank=2)


@pytest.fixture
def toy_batch():
    return random_batch(4, 3, 16, seed=12, soft=True)


def train(model, batches, epochs, lr=0.3, seed=0):
    rng = RngStream(seed, 99)
    state = mdl.SgdState()
    for _ in range(epochs):
        for b in rng.permutation(len(batches)):
            mdl.train_step(model, batches[int(b)], state, lr)
    return model


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS, key=lambda k: (int(str(k).split("-")[0]), str(k))):
        terminalreporter.write_line(mod.RESULTS[key])
