import numpy as np
import pytest

from mtlight.scenario import LaneParams, gen_grid, grid_routes
from mtlight.sim import build_network, new_state

# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def grid1_spec():
    return gen_grid(1, 1)


@pytest.fixture(scope="session")
def grid1(grid1_spec):
    return build_network(grid1_spec)


@pytest.fixture(scope="session")
def grid2_spec():
    return gen_grid(2, 2)


@pytest.fixture(scope="session")
def grid4_spec():
    return gen_grid(4, 4)


@pytest.fixture(scope="session")
def short_grid1():
    """1x1 grid whose lanes take a single tick to traverse."""
    spec = gen_grid(1, 1, LaneParams(length=10.0, capacity=10))
    return spec, build_network(spec)


def lane_route(network, spec, first_lane: str):
    """Index route of the 1x1 grid route that starts on ``first_lane``."""
    for r in grid_routes(spec):
        if r[0] == first_lane:
            return tuple(network.lane(l) for l in r)
    raise KeyError(first_lane)


def run_ticks(state, n, actions=None):
    A = len(state.network.intersections)
    acts = np.zeros(A, dtype=int) if actions is None else actions
    from mtlight.sim import step
    for _ in range(n):
        step(state, acts)
    return state
