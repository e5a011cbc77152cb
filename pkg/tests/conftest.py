import numpy as np
import pytest

from widemeta.nn import ModelConfig, build_model

# Lines collected by tests/test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    # same 28 -> 14 -> 7 -> 4 -> 2 geometry, fewer filters so tests stay quick
    return ModelConfig(base_filters=8)


@pytest.fixture
def small_model(small_cfg):
    return build_model(small_cfg, np.random.default_rng(0))
