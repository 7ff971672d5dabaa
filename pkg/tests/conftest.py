import pytest
from hypothesis import HealthCheck, settings

from mmvlab.cone import ConeConstraint

from builders import constant_market, two_atom_insurance

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def market2():
    """Two assets, three Brownian motions, constant coefficients."""
    return constant_market([0.08, 0.05], [[0.2, 0.05, 0.0], [0.0, 0.25, 0.1]])


@pytest.fixture
def binding_market():
    """Second asset has negative excess return, so the no-short cone binds."""
    return constant_market([0.08, -0.03], [[0.2, 0.0], [0.12, 0.25]])


@pytest.fixture
def insurance():
    return two_atom_insurance()


@pytest.fixture
def free2():
    return ConeConstraint.unconstrained(2)


@pytest.fixture
def orthant2():
    return ConeConstraint.nonnegative(2)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
