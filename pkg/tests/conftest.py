import numpy as np
import pytest

from pseudostrata.core import Dataset
from pseudostrata.simulation import Population, SimulationConfig, generate

ACCEPTANCE_RESULTS = {}


def record_acceptance(key, passed, detail):
    ACCEPTANCE_RESULTS[key] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")

    def order(k):
        return int(k[2:]) if k[2:].isdigit() else 99

    for key in sorted(ACCEPTANCE_RESULTS, key=order):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}: {detail}")


@pytest.fixture(scope="session")
def exp_population():
    return Population("exp")


@pytest.fixture(scope="session")
def linear_population():
    return Population("linear")


@pytest.fixture(scope="session")
def small_labeled():
    return generate(SimulationConfig(n=1500, seed=11), 0)


@pytest.fixture(scope="session")
def small_data(small_labeled):
    return small_labeled.data


def make_dataset(n=400, seed=0, a_dim=1, c_dim=1):
    """Small random dataset satisfying every structural invariant."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, a_dim))
    c = rng.standard_normal((n, c_dim))
    z = rng.integers(0, 2, n)
    s = (rng.random(n) < 0.5).astype(int)
    y = np.where(s == 1, rng.exponential(2.0, n), 0.0)
    return Dataset(z, s, y, a, c)
