import pytest

from kinbridge.model import build_grid, invariant_measure, quadratic_potential


@pytest.fixture(scope="session")
def pot11():
    return quadratic_potential(1.0, 1.0)


@pytest.fixture(scope="session")
def grid81():
    return build_grid((-6.0, 6.0), (-6.0, 6.0), 81, 81)


@pytest.fixture(scope="session")
def m81(pot11, grid81):
    return invariant_measure(pot11, grid81)


@pytest.fixture(scope="session")
def grid41():
    return build_grid((-6.0, 6.0), (-6.0, 6.0), 41, 41)


@pytest.fixture(scope="session")
def m41(pot11, grid41):
    return invariant_measure(pot11, grid41)
