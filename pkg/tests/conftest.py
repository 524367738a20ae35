from dataclasses import dataclass, replace

import numpy as np
import pytest

from shockctl.experiment import RunResult, Scenario, make_plant, run
from shockctl.traffic_core import VEH_PER_KM, FundamentalDiagram, matched_setpoint


@pytest.fixture(scope="session")
def fd():
    return FundamentalDiagram(40.0, 160 * VEH_PER_KM)


@pytest.fixture(scope="session")
def sp(fd):
    return matched_setpoint(32 * VEH_PER_KM, 200.0, 500.0, fd)


@pytest.fixture(scope="session")
def scenario():
    return Scenario()


@dataclass
class Probe:
    """A run plus per-step boundary, interface and delay data."""

    result: RunResult
    rows: np.ndarray  # columns documented in probe_run

    def col(self, i):
        return self.rows[:, i]


def probe_run(scn: Scenario, policy: str = "backstepping") -> Probe:
    """Columns: t, rho~_f(l), U_in(t - l/u), rho~_c(l), U_out(t - (L-l)/u), w_f(0), w_c(L)."""
    sp, params = scn.setpoint, scn.params
    plant = make_plant(scn)
    rows = []

    def obs(state, applied, target):
        t, l, u = state.t, state.l, params.u
        rows.append((
            t,
            state.free.sample(l) - sp.rho_f_star,
            plant.in_history(t - l / u),
            state.congested.sample(l) - sp.rho_c_star,
            plant.out_history(t - (sp.L - l) / u),
            target.w_f.values[0],
            target.w_c.values[-1],
        ))
    res = run(scn, policy, observer=obs, plant=plant)
    return Probe(res, np.array(rows, dtype=float))


@pytest.fixture(scope="session")
def closed_default(scenario):
    return probe_run(scenario, "backstepping")


@pytest.fixture(scope="session")
def open_default(scenario):
    return run(scenario, "open_loop")


@pytest.fixture(scope="session")
def amplitude_sweep(scenario):
    from shockctl.experiment import sweep

    return sweep(replace(scenario, horizon=60.0), "amplitude_scale", [1.0, 0.5, 0.25, 0.125])


@pytest.fixture(scope="session")
def short_scenario():
    return replace(Scenario(), horizon=3.0)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
