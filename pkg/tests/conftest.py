import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from simtraj import mechanism as M

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ds6():
    return M.davis_skodje(6.0)


@pytest.fixture(scope="session")
def h2():
    return M.h2_6species()


@pytest.fixture(scope="session")
def ozone1000():
    return M.ozone(1000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_feasible(m, rng, count):
    """Random compositions with all entries positive that satisfy the conservation relations."""
    out = []
    if not m.conservation:
        return [rng.uniform(0.05, 2.0, m.n_species) for _ in range(count)]
    base = M.feasible_composition(m)
    N = m.null_basis
    while len(out) < count:
        c = base + N @ rng.normal(scale=0.5 * base.min(), size=N.shape[1])
        if np.all(c > 1e-3 * base.min()):
            out.append(c)
    return out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
