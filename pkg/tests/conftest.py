import numpy as np
import pytest
import torch

from _helpers import synth_pairs


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pair_dir(tmp_path):
    return synth_pairs(tmp_path / "pairs")


def pytest_terminal_summary(terminalreporter):
    from _helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
