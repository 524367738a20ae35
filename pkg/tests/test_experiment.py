import csv
import logging
from dataclasses import replace

import numpy as np
import pytest

from shockctl.experiment import (
    TRACE_COLUMNS,
    ConfigError,
    Scenario,
    compare,
    load_scenario,
    run,
    scenario_to_ini,
    sweep,
    write_comparison_csv,
    write_trace_csv,
)
from shockctl.report import write_profiles, write_sweep_report
from shockctl.traffic_core import VEH_PER_KM

MINIMAL = """\
[physical]
L_m = 500
rho_m_veh_per_km = 160

[setpoint]
rho_f_star_veh_per_km = 32
l_star_m = 200

[initial]
l0_m = 330
"""


def write(tmp_path, text, name="scn.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_minimal_file(self, tmp_path):
        scn = load_scenario(write(tmp_path, MINIMAL))
        assert scn.L == 500.0 and scn.l_star == 200.0 and scn.l0 == 330.0
        assert scn.rho_f_star == pytest.approx(32 * VEH_PER_KM)
        assert scn.setpoint.rho_c_star == pytest.approx(128 * VEH_PER_KM)

    def test_defaults_logged(self, tmp_path, caplog):
        with caplog.at_level(logging.INFO, logger="shockctl"):
            load_scenario(write(tmp_path, MINIMAL))
        text = caplog.text
        assert "default k_f" in text and "default k_c" in text and "default v_m" in text

    def test_kmph_speed(self, tmp_path):
        scn = load_scenario(write(tmp_path, MINIMAL.replace("L_m = 500", "L_m = 500\nv_m_kmph = 144")))
        assert scn.v_m == pytest.approx(40.0)

    @pytest.mark.parametrize("edit, match", [
        (("l_star_m = 200", "l_star_m = 600"), "l_star"),
        (("l0_m = 330", "l0_m = 330\nbogus = 1"), "unknown key"),
        (("[initial]", "[gains]"), "belongs in section"),
        (("l0_m = 330", "l0_m = abc"), "must be a number"),
        (("l0_m = 330", "l0_m = 330\n[numerics]\nn_cells = 2.5"), "integer"),
        (("l0_m = 330", "l0_m = 330\n[numerics]\nplant_mode = spectral"), "plant_mode"),
        (("l0_m = 330", "l0_m = 330\namp_free_veh_per_km = 30"), "free density"),
        (("L_m = 500", "L_m = 500\nv_m_kmph = 144\nv_m_mps = 40"), "duplicates"),
    ])
    def test_rejected(self, tmp_path, edit, match):
        with pytest.raises(ConfigError, match=match):
            load_scenario(write(tmp_path, MINIMAL.replace(*edit)))

    def test_inline_comments(self, tmp_path):
        text = MINIMAL.replace("l0_m = 330", "l0_m = 300   ; shock start\n# full-line note")
        assert load_scenario(write(tmp_path, text)).l0 == 300.0

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_scenario(tmp_path / "absent.ini")
        with pytest.raises(ConfigError, match="malformed"):
            load_scenario(write(tmp_path, "no section header\n"))

    def test_ini_round_trip(self, tmp_path):
        scn = replace(Scenario(), k_f=2e-4, n_cells=150, plant_mode="nonlinear",
                      lam=5000.0, snapshot_times=(0.0, 12.5))
        assert load_scenario(write(tmp_path, scenario_to_ini(scn))) == scn


class TestRun:
    def test_equilibrium_stays_put(self, tmp_path):
        scn = replace(Scenario(), amplitude_scale=0.0, horizon=5.0)
        res = run(scn)
        tr = res.trace
        assert res.completed
        assert np.all(tr.column("l") == scn.l_star)
        assert np.all(tr.column("V") == 0.0)
        assert np.all(tr.column("u_in") == 0.0) and np.all(tr.column("u_out") == 0.0)

    def test_equilibrium_policies_agree(self, tmp_path):
        closed, opened = compare(replace(Scenario(), amplitude_scale=0.0, horizon=2.0))
        assert np.array_equal(closed.trace.column("l"), opened.trace.column("l"))
        assert np.array_equal(closed.trace.column("V"), opened.trace.column("V"))

    def test_deterministic_csv(self, short_scenario, tmp_path):
        a = write_trace_csv(run(short_scenario), tmp_path / "a.csv")
        b = write_trace_csv(run(short_scenario), tmp_path / "b.csv")
        assert a.read_bytes() == b.read_bytes()

    def test_trace_layout(self, short_scenario, tmp_path):
        table = rows(write_trace_csv(run(short_scenario), tmp_path / "t.csv"))
        assert tuple(table[0]) == TRACE_COLUMNS
        t = np.array([float(r[0]) for r in table[1:]])
        assert t[0] == 0.0
        np.testing.assert_allclose(np.diff(t), short_scenario.dt, rtol=1e-9)
        assert len(t) == short_scenario.n_steps + 1

    def test_unknown_policy(self, short_scenario):
        with pytest.raises(ValueError):
            run(short_scenario, "bang_bang")

    def test_snapshots(self, short_scenario, tmp_path):
        res = run(replace(short_scenario, snapshot_times=(0.0, 1.5)))
        paths = write_profiles(res, tmp_path, "x_")
        assert [p.name for p in paths] == ["x_profile_t0s.csv", "x_profile_t1.5s.csv",
                                           "x_profile_final.csv"]
        table = rows(paths[0])
        assert table[0] == ["x_m", "rho_veh_per_km", "regime"]
        x = np.array([float(r[0]) for r in table[1:]])
        assert np.all(np.diff(x) >= 0)
        assert {r[2] for r in table[1:]} == {"free", "congested"}

    def test_comparison_rows(self, scenario, tmp_path):
        scn = replace(scenario, horizon=2.0)
        closed, opened = compare(scn)
        opened.trace.records = opened.trace.records[:57]  # as if it exited early
        table = rows(write_comparison_csv(closed, opened, tmp_path / "c.csv"))
        assert len(table) - 1 == 57


class TestSweep:
    def test_empty(self, scenario):
        assert sweep(scenario, "gain", []) == {}

    def test_unknown_parameter(self, scenario):
        with pytest.raises(ValueError, match="not sweepable"):
            sweep(scenario, "rho_m", [1.0])

    def test_failures_stay_per_run(self, short_scenario, tmp_path):
        res = sweep(short_scenario, "l0", [600.0, 330.0])
        assert res[600.0].status == "SolverError" and "l0" in res[600.0].error
        assert res[330.0].completed
        files = write_sweep_report("l0", res, tmp_path)
        table = rows(files["sweep"])
        assert table[0][0] == "l0" and len(table) == 3
        assert table[1][1] == "SolverError" and table[2][1] == "Completed"
        assert len(files["traces"]) == 1

    def test_weak_gain_settles_later(self, scenario, closed_default):
        weak = sweep(replace(scenario, horizon=60.0), "gain", [2e-5])[2e-5]
        ref = closed_default.result.summary.settle_time
        assert ref is not None
        assert weak.summary.settle_time is None or weak.summary.settle_time > ref
        assert weak.summary.sigma0 < closed_default.result.summary.sigma0
