import time

import numpy as np
import pytest

from bl_lab.grid import build_grid, default_box
from bl_lab.operator import assemble, bump_potential
from bl_lab.spectral import eig

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}
# wall-clock seconds spent building shared fixtures
TIMINGS: dict[str, float] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(scope="session")
def cube9():
    return build_grid(3, [1, 1, 1], 9)


@pytest.fixture(scope="session")
def cube17():
    return build_grid(3, [1, 1, 1], 17)


@pytest.fixture(scope="session")
def neumann17(cube17):
    return assemble(cube17)


@pytest.fixture(scope="session")
def neumann17_ds(neumann17):
    return eig(neumann17, 200, keep_interior=True)


@pytest.fixture(scope="session")
def small_pair():
    """Bump vs zero potential on a coarse anisotropic box, with 150 modes each."""
    g = build_grid(3, [1.0, 1.05, 1.1], 13)
    opA = assemble(g, bump_potential(g))
    opB = assemble(g)
    return opA, opB, eig(opA, 150), eig(opB, 150)


@pytest.fixture(scope="session")
def box24():
    return default_box(24)


@pytest.fixture(scope="session")
def box24_pair(box24):
    """Bump (amplitude 5, radius 0.2) vs zero potential on the 24^3 box, K=300."""
    t0 = time.perf_counter()
    opA = assemble(box24, bump_potential(box24))
    opB = assemble(box24)
    out = opA, opB, eig(opA, 300), eig(opB, 300)
    TIMINGS["box24_pair"] = time.perf_counter() - t0
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
