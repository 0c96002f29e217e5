import numpy as np
import pytest
from hypothesis import settings

from psfvae.simgen import SimConfig, prepare, simulate_dataset

settings.register_profile("default", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_sim():
    cfg = SimConfig(num_users=300, num_items=80, seed=3)
    data, truth = simulate_dataset(cfg)
    return cfg, data, truth


@pytest.fixture(scope="session")
def small_prepared(small_sim):
    _, data, _ = small_sim
    return prepare(data, 0.3, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
