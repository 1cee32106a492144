import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stlod.coefficient import generate_random  # noqa: E402
from stlod.discretization import Discretization  # noqa: E402
from stlod.grid import build_mesh_pair, build_temporal_grid  # noqa: E402

CRITERIA = {}


def record_criterion(number, passed, detail):
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")


def desk_disc(periodic=False, seed=11):
    """n_H = 2, n_h = 4, N_T = 3, N_t = 4 with a random coefficient."""
    pair = build_mesh_pair(2, 4)
    tgrid = build_temporal_grid(0.75, 3, 4)
    if periodic:
        coeff = generate_random(seed, 0.125, 0.125, 0.01, 0.1, periodic=True, period=0.25)
    else:
        coeff = generate_random(seed, 0.125, 0.125, 0.01, 0.1, periodic=False, t_final=0.75)
    return Discretization(pair, tgrid, coeff)


@pytest.fixture(scope="session")
def desk():
    return desk_disc()


@pytest.fixture(scope="session")
def desk_periodic():
    return desk_disc(periodic=True)
