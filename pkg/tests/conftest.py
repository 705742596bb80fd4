import numpy as np
import pytest

from lmnet.data import write_synthetic_dataset
from lmnet.model import GraphConfig

# Results of acceptance-marked tests, printed as one line each in the
# terminal summary: number -> (label, passed).
_acceptance_results = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(n, label): marks one acceptance criterion"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        marker = item.get_closest_marker("acceptance")
        if marker:
            n, label = marker.args
            _acceptance_results[n] = (label, rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for n in sorted(_acceptance_results):
        label, passed = _acceptance_results[n]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {n} {label}: {status}")


TINY_GRAPH = GraphConfig(input_size=(8, 8), channel_sequence=(2, 2, 3, 3))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """16x16 synthetic prepared layout: 8 train / 4 val / 4 test."""
    root = tmp_path_factory.mktemp("tiny-data")
    index = write_synthetic_dataset(
        root, {"train": 8, "val": 4, "test": 4}, size=16, seed=5
    )
    return index


@pytest.fixture(scope="session")
def overfit_dataset(tmp_path_factory):
    """64x64 synthetic prepared layout for the overfit experiment."""
    root = tmp_path_factory.mktemp("overfit-data")
    return write_synthetic_dataset(root, {"train": 16, "val": 4}, size=64, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
