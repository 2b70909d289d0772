import pytest
import torch

from privreplace.data import SyntheticDataConfig, generate_synthetic


@pytest.fixture(autouse=True)
def _single_thread():
    # results must not depend on the machine's core count
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic(SyntheticDataConfig(n_train=4000, n_test=1000, seed=3))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance")
        for line in RESULTS:
            terminalreporter.write_line(line)
