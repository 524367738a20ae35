"""File outputs for runs, comparisons and sweeps: CSV, JSON and figures."""

from __future__ import annotations

import csv
import json
from collections import deque
from pathlib import Path
from typing import Optional

import numpy as np

from . import plotting
from .experiment import (
    RunResult,
    Scenario,
    _fmt,
    run,
    scenario_to_ini,
    write_comparison_csv,
    write_profile_csv,
    write_summary,
    write_trace_csv,
)
from .transform import target_residual

RESIDUAL_WINDOW_S = 1.0


def _snapshot_name(key) -> str:
    return "final" if key == "final" else f"t{float(key):g}s"


def write_profiles(result: RunResult, out_dir: Path, prefix: str = "") -> list[Path]:
    paths = []
    timed = sorted(k for k in result.snapshots if k != "final")
    for key in timed + ["final"]:
        state = result.snapshots[key]
        name = f"{prefix}profile_{_snapshot_name(key)}.csv"
        paths.append(write_profile_csv(state, result.scenario.fd, out_dir / name))
    return paths


def _first_snapshot(result: RunResult):
    timed = [k for k in result.snapshots if k != "final"]
    return result.snapshots[min(timed)] if timed else result.snapshots["final"]


def run_with_residual(scn: Scenario, policy: str) -> tuple[RunResult, Optional[dict]]:
    """Run, keeping the last second of states for a target-system residual.

    Only linearized backstepping runs have a target system to check.
    """
    if scn.plant_mode != "linearized" or policy != "backstepping":
        return run(scn, policy), None
    keep = deque(maxlen=int(round(RESIDUAL_WINDOW_S / scn.dt)) + 1)
    # plant states are rebuilt every step, so holding references is safe
    result = run(scn, policy, observer=lambda s, a, _tg: keep.append((s, a)))
    if len(keep) < 3:
        return result, None
    rep = target_residual(list(keep), scn.gains, scn.params, scn.setpoint)
    out = rep.as_dict()
    out["window_start_s"] = float(_fmt(keep[0][0].t))
    return result, out


def _summary_doc(result: RunResult, residual: Optional[dict]) -> dict:
    doc = write_summary(result)
    doc["lambda"] = result.trace.lam
    doc["trace_rows"] = len(result.trace)
    if residual is not None:
        doc["target_residual"] = residual
    return doc


def _dump(doc, path: Path) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def write_run_report(result: RunResult, out_dir, residual: Optional[dict] = None,
                     figures: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scn = result.scenario
    files = {"trace": write_trace_csv(result, out / "trace.csv")}
    files["profiles"] = write_profiles(result, out)
    (out / "scenario.ini").write_text(scenario_to_ini(scn))
    files["summary"] = _dump(_summary_doc(result, residual), out / "summary.json")
    if figures:
        tr = result.trace
        files["fig_profiles"] = plotting.density_profiles(
            _first_snapshot(result), result.snapshots["final"], out / "profiles.png",
            scn.fd.jump_density)
        files["fig_inputs"] = plotting.boundary_inputs(tr.t, tr.column("u_in"),
                                                       tr.column("u_out"), out / "inputs.png")
    return files


def write_compare_report(closed: RunResult, opened: RunResult, out_dir,
                         residual: Optional[dict] = None, figures: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scn = closed.scenario
    files = {
        "trace_closed": write_trace_csv(closed, out / "trace_closed.csv"),
        "trace_open": write_trace_csv(opened, out / "trace_open.csv"),
        "comparison": write_comparison_csv(closed, opened, out / "comparison.csv"),
        "profiles_closed": write_profiles(closed, out, "closed_"),
        "profiles_open": write_profiles(opened, out, "open_"),
    }
    (out / "scenario.ini").write_text(scenario_to_ini(scn))
    doc = {"closed_loop": _summary_doc(closed, residual), "open_loop": _summary_doc(opened, None)}
    files["summary"] = _dump(doc, out / "summary.json")
    if figures:
        a, b = closed.trace, opened.trace
        files["fig_interface"] = plotting.interface_positions(
            a.t, a.column("l"), b.t, b.column("l"), scn.l_star, scn.L, out / "interface.png")
        files["fig_inputs"] = plotting.boundary_inputs(a.t, a.column("u_in"), a.column("u_out"),
                                                       out / "inputs.png")
        files["fig_profiles"] = plotting.density_profiles(
            _first_snapshot(closed), closed.snapshots["final"], out / "profiles.png",
            scn.fd.jump_density)
    return files


def compare_with_residual(scn: Scenario):
    closed, residual = run_with_residual(scn, "backstepping")
    return closed, run(scn, "open_loop"), residual


SWEEP_COLUMNS = ("value", "status", "settle_time_s", "exit_time_s", "max_abs_input_veh_per_m",
                 "sigma0_per_s", "r_squared", "V0", "max_X2_m2", "error")


def write_sweep_csv(parameter: str, results: dict, path) -> Path:
    path = Path(path)

    def opt(x):
        return "" if x is None else _fmt(x)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((parameter,) + SWEEP_COLUMNS[1:])
        for value, res in results.items():
            s = res.summary
            V = res.trace.column("V")
            X = res.trace.column("X")
            w.writerow((_fmt(value), res.status,
                        opt(s.settle_time if s else None), opt(s.exit_time if s else None),
                        opt(s.max_abs_input if s else None), opt(s.sigma0 if s else None),
                        opt(s.r_squared if s else None),
                        opt(V[0] if len(V) else None),
                        opt(float(np.max(X ** 2)) if len(X) else None),
                        res.error or ""))
    return path


def write_sweep_report(parameter: str, results: dict, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"sweep": write_sweep_csv(parameter, results, out / "sweep.csv"), "traces": []}
    for i, res in enumerate(results.values()):
        if len(res.trace):
            files["traces"].append(write_trace_csv(res, out / f"trace_{i:02d}.csv"))
    return files

