import numpy as np
import pytest

from mfgcn import LQSpec, SolverConfig, solve_mfg
from mfgcn.simulate import InitialLaw, TimeGrid, initial_states

CANONICAL = LQSpec()


def canonical_cloud(M=512, seed=42):
    return initial_states(InitialLaw.gaussian(1.0, 0.25), 1, M, seed)[0]


@pytest.fixture(scope="session")
def lq():
    return CANONICAL


@pytest.fixture(scope="session")
def lq_model():
    return CANONICAL.to_model()


@pytest.fixture(scope="session")
def small_grid():
    return TimeGrid(0.0, 1.0, 20)


@pytest.fixture(scope="session")
def small_config():
    return SolverConfig(K=16, M=256, seed=7)


@pytest.fixture(scope="session")
def small_eq(lq_model, small_grid, small_config):
    xi = canonical_cloud(small_config.M, small_config.seed)
    return solve_mfg(lq_model, small_grid, xi, small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
