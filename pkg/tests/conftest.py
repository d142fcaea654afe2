import numpy as np
import pytest

from advrestore.data import make_dataset, stack_pairs
from advrestore.nets import BLOCK_KINDS, ArchVariant, build_model
from advrestore.training import TrainConfig, train_loop


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=BLOCK_KINDS)
def variant_kind(request):
    return request.param


@pytest.fixture(scope="session")
def toy_models():
    """Untrained width-8, 3-level models of every variant (seed 0, float64)."""
    return {k: build_model(ArchVariant(kind=k), seed=0) for k in BLOCK_KINDS}


@pytest.fixture(scope="session")
def toy_data():
    train = make_dataset(64, 32, 32, "gaussian", seed=7, split="train")
    test = make_dataset(8, 32, 32, "gaussian", seed=7, split="test")
    return train, test


@pytest.fixture(scope="session")
def trained_nafnet(toy_data):
    """A briefly trained NAFNet, enough for attacks to have a meaningful target."""
    train, _ = toy_data
    model = build_model(ArchVariant(kind="nafnet"), seed=0)
    trained, _ = train_loop(model, train, TrainConfig(steps=150, val_every=0, seed=0))
    return trained


@pytest.fixture(scope="session")
def test_batch(toy_data):
    _, test = toy_data
    return stack_pairs(test)


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
