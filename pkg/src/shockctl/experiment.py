"""Scenario configuration, closed/open-loop runs, comparisons and sweeps."""

from __future__ import annotations

import configparser
import copy
import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import control
from .control import ControlGains, ControlInput, apply_boundary
from .diagnostics import (
    LyapunovWeights,
    MetricsTrace,
    decay_rate_fit,
    record_metrics,
)
from .plant import (
    DomainExit,
    DomainExitError,
    LinearizedPlant,
    NonlinearPlant,
    PlantState,
    SoftShock,
    SolverError,
    check_validity,
    exit_margin,
)
from .traffic_core import (
    KMPH,
    VEH_PER_KM,
    DerivedParams,
    FundamentalDiagram,
    Setpoint,
    SetpointError,
    derived_params,
    matched_setpoint,
)
from .transform import forward_transform

log = logging.getLogger(__name__)

POLICIES = ("backstepping", "open_loop")
PLANT_MODES = ("linearized", "nonlinear")
SETTLE_BAND_M = 5.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    """A fully specified run, in SI units."""

    v_m: float = 40.0
    rho_m: float = 160 * VEH_PER_KM
    L: float = 500.0
    rho_f_star: float = 32 * VEH_PER_KM
    l_star: float = 200.0
    l0: float = 330.0
    amp_free: float = 12 * VEH_PER_KM
    amp_congested: float = 12 * VEH_PER_KM
    ramp_width: float = 20.0
    amplitude_scale: float = 1.0
    k_f: float = 1.75e-4
    k_c: float = 1.75e-4
    n_cells: int = 200
    dt: float = 0.01
    cfl: float = 0.9
    plant_mode: str = "linearized"
    lam: Optional[float] = None
    saturation_margin: float = 1 * VEH_PER_KM
    horizon: float = 120.0
    snapshot_times: tuple = (0.0,)

    @property
    def fd(self) -> FundamentalDiagram:
        return FundamentalDiagram(self.v_m, self.rho_m)

    @property
    def setpoint(self) -> Setpoint:
        return matched_setpoint(self.rho_f_star, self.l_star, self.L, self.fd)

    @property
    def params(self) -> DerivedParams:
        return derived_params(self.setpoint, self.fd)

    @property
    def gains(self) -> ControlGains:
        return ControlGains.from_gains(self.k_f, self.k_c, self.fd.b)

    @property
    def weights(self) -> LyapunovWeights:
        return LyapunovWeights.for_gains(self.gains, self.params, self.lam)

    @property
    def profile(self) -> SoftShock:
        s = self.amplitude_scale
        return SoftShock(s * self.amp_free, s * self.amp_congested,
                         self.l_star + s * (self.l0 - self.l_star), self.ramp_width)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def validate(self) -> Scenario:
        try:
            sp = self.setpoint
            self.params
            self.gains
            self.weights
        except (SetpointError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not self.dt > 0:
            raise ConfigError(f"dt_s must be positive, got {self.dt}")
        if not self.horizon > 0:
            raise ConfigError(f"horizon_s must be positive, got {self.horizon}")
        if self.n_cells < 3:
            raise ConfigError(f"n_cells must be at least 3, got {self.n_cells}")
        if not 0.0 < self.cfl <= 1.0:
            raise ConfigError(f"cfl must lie in (0, 1], got {self.cfl}")
        if self.plant_mode not in PLANT_MODES:
            raise ConfigError(f"plant_mode must be one of {PLANT_MODES}, got {self.plant_mode!r}")
        if not self.ramp_width > 0:
            raise ConfigError(f"ramp_width_m must be positive, got {self.ramp_width}")
        prof = self.profile
        if not 0.0 < prof.l0 < self.L:
            raise ConfigError(f"0 < l0 < L violated: l0={prof.l0}, L={self.L}")
        peak_f = sp.rho_f_star + 2.0 * prof.amp_free
        peak_c = sp.rho_c_star + 2.0 * prof.amp_congested
        jump = self.fd.jump_density
        if not (0.0 < sp.rho_f_star + prof.amp_free and peak_f < jump):
            raise ConfigError("initial free density must stay in (0, rho_jump): "
                              f"amp_free_veh_per_km={self.amp_free / VEH_PER_KM}")
        if not (jump < sp.rho_c_star + prof.amp_congested and peak_c < self.rho_m):
            raise ConfigError("initial congested density must stay in (rho_jump, rho_m): "
                              f"amp_congested_veh_per_km={self.amp_congested / VEH_PER_KM}")
        return self


# key -> (section, Scenario field, conversion to SI, documented default note)
_KEYS = {
    "v_m_mps": ("physical", "v_m", 1.0),
    "v_m_kmph": ("physical", "v_m", KMPH),
    "rho_m_veh_per_km": ("physical", "rho_m", VEH_PER_KM),
    "L_m": ("physical", "L", 1.0),
    "rho_f_star_veh_per_km": ("setpoint", "rho_f_star", VEH_PER_KM),
    "l_star_m": ("setpoint", "l_star", 1.0),
    "l0_m": ("initial", "l0", 1.0),
    "amp_free_veh_per_km": ("initial", "amp_free", VEH_PER_KM),
    "amp_congested_veh_per_km": ("initial", "amp_congested", VEH_PER_KM),
    "ramp_width_m": ("initial", "ramp_width", 1.0),
    "amplitude_scale": ("initial", "amplitude_scale", 1.0),
    "k_f_veh_per_m2": ("gains", "k_f", 1.0),
    "k_c_veh_per_m2": ("gains", "k_c", 1.0),
    "n_cells": ("numerics", "n_cells", None),
    "dt_s": ("numerics", "dt", 1.0),
    "cfl": ("numerics", "cfl", 1.0),
    "plant_mode": ("numerics", "plant_mode", None),
    "lambda": ("numerics", "lam", 1.0),
    "saturation_margin_veh_per_km": ("numerics", "saturation_margin", VEH_PER_KM),
    "horizon_s": ("run", "horizon", 1.0),
    "snapshot_times_s": ("run", "snapshot_times", None),
}

# defaults standing in for values the source scenario leaves open
_GAP_NOTES = {
    "v_m": "maximum speed not given; 40 m/s gives u = 24 m/s",
    "k_f": "gain not given; tuned to settle within about 40 s",
    "k_c": "gain not given; tuned to settle within about 40 s",
    "amp_free": "initial amplitude reconstructed, not source data",
    "amp_congested": "initial amplitude reconstructed, not source data",
    "ramp_width": "soft-shock width reconstructed, not source data",
    "lam": "lambda defaults to 8b/(a u)",
}


def _convert(key: str, raw: str, factor):
    raw = raw.strip()
    if key == "n_cells":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"n_cells must be an integer, got {raw!r}") from None
    if key == "plant_mode":
        return raw
    if key == "snapshot_times_s":
        try:
            return tuple(float(p) for p in raw.split(",") if p.strip())
        except ValueError:
            raise ConfigError(f"snapshot_times_s must be comma-separated seconds, got {raw!r}") from None
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {raw!r}") from None
    if not math.isfinite(value):
        raise ConfigError(f"{key} must be finite, got {raw!r}")
    return value * factor


def scenario_from_mapping(sections: dict) -> Scenario:
    """Build a scenario from ``{section: {key: raw string}}``."""
    values = {}
    for section, items in sections.items():
        for key, raw in items.items():
            if key not in _KEYS:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            want, name, factor = _KEYS[key]
            if section != want:
                raise ConfigError(f"key {key!r} belongs in section [{want}], found in [{section}]")
            if name in values:
                raise ConfigError(f"{key!r} duplicates another key setting {name}")
            values[name] = _convert(key, raw, factor)
    defaults = Scenario()
    for f in fields(Scenario):
        if f.name not in values:
            note = _GAP_NOTES.get(f.name)
            value = getattr(defaults, f.name)
            if note:
                log.info("default %s = %r (%s)", f.name, value, note)
            else:
                log.info("default %s = %r", f.name, value)
    return replace(defaults, **values).validate()


def load_scenario(path) -> Scenario:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are case-sensitive (L_m)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return scenario_from_mapping({s: dict(parser[s]) for s in parser.sections()})


def scenario_to_ini(scn: Scenario) -> str:
    """Serialize a scenario back to the config format (SI keys)."""
    out = {}
    for key, (section, name, factor) in _KEYS.items():
        if key in ("v_m_kmph",):
            continue
        value = getattr(scn, name)
        if value is None:
            continue
        if key == "snapshot_times_s":
            text = ", ".join(repr(float(v)) for v in value)
        elif factor is None:
            text = str(value)
        else:
            text = repr(value / factor)
        out.setdefault(section, []).append(f"{key} = {text}")
    return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in out.items())


# ---------------------------------------------------------------- running


@dataclass
class RunSummary:
    settle_time: Optional[float]
    exit_time: Optional[float]
    max_abs_input: float
    sigma0: Optional[float]
    r_squared: Optional[float]


@dataclass
class RunResult:
    scenario: Scenario
    policy: str
    trace: MetricsTrace
    status: str  # "Completed" | "DomainExit" | "SolverError"
    exit: Optional[DomainExit] = None
    error: Optional[str] = None
    snapshots: dict = field(default_factory=dict)
    summary: Optional[RunSummary] = None

    @property
    def completed(self) -> bool:
        return self.status == "Completed"


def make_plant(scn: Scenario):
    if scn.plant_mode == "linearized":
        return LinearizedPlant(scn.profile, scn.setpoint, scn.fd, scn.params, scn.n_cells, scn.dt)
    return NonlinearPlant(scn.profile, scn.setpoint, scn.fd, scn.params, scn.n_cells, scn.cfl)


def make_policy(name: str, scn: Scenario, plant) -> Callable[[PlantState], ControlInput]:
    sp, gains, params = scn.setpoint, scn.gains, scn.params
    if name == "backstepping":
        if scn.plant_mode == "linearized":
            return lambda s: control.consistent_backstepping_controls(s, sp, gains, params)
        return lambda s: control.backstepping_controls(s, sp, gains, params)
    if name == "open_loop":
        hold = ControlInput(*plant.initial_inputs)
        return lambda s: control.open_loop_controls(hold)
    raise ValueError(f"unknown policy {name!r}; expected one of {POLICIES}")


def _summarize(result: RunResult) -> RunSummary:
    tr = result.trace
    t = tr.t
    X = tr.column("X")
    U = np.maximum(np.abs(tr.column("u_in")), np.abs(tr.column("u_out")))
    settle = None
    if result.completed and len(X):
        outside = np.nonzero(np.abs(X) > SETTLE_BAND_M)[0]
        settle = 0.0 if len(outside) == 0 else (
            float(t[outside[-1] + 1]) if outside[-1] + 1 < len(t) else None)
    sigma0 = r2 = None
    if len(t) and t[-1] > 4.0:
        try:
            sigma0, r2 = decay_rate_fit(tr, (2.0, min(40.0, float(t[-1]))))
        except ValueError:
            pass
    return RunSummary(settle, result.exit.t if result.exit is not None else None,
                      float(U.max()) if len(U) else 0.0, sigma0, r2)


def run(scn: Scenario, policy: str = "backstepping",
        observer: Optional[Callable] = None, plant=None) -> RunResult:
    """Fixed-step closed loop: state -> policy -> boundary -> record -> step.

    ``observer(state, applied_input, target)`` is called once per record
    (after the boundary values of that instant are in place). A fresh
    ``plant`` from :func:`make_plant` may be passed in so the caller can
    inspect it while the run proceeds.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    sp, fd, params = scn.setpoint, scn.fd, scn.params
    gains, weights = scn.gains, scn.weights
    if plant is None:
        plant = make_plant(scn)
    elif plant.state.t != 0.0:
        raise ValueError("plant must be fresh (t = 0)")
    law = make_policy(policy, scn, plant)
    trace = MetricsTrace(lam=weights.lam)
    result = RunResult(scn, policy, trace, "Completed")
    margin = exit_margin(sp.L, scn.n_cells)
    snaps = sorted(scn.snapshot_times)
    for k in range(scn.n_steps + 1):
        t_k = k * scn.dt
        state = plant.state
        status = check_validity(state, margin)
        if not status:
            result.status, result.exit = "DomainExit", status
            break
        inp = law(state)
        _, _, applied, events = apply_boundary(state, inp, sp, fd, scn.saturation_margin)
        plant.apply(state.t, applied.u_in, applied.u_out)
        state = plant.state
        target = forward_transform(state, sp, gains, params)
        labels = [f"saturation_{e.side}" for e in events]
        rec = record_metrics(state, target, weights, sp, applied.u_in, applied.u_out, labels)
        rec.t = t_k
        trace.append(rec)
        if observer is not None:
            observer(state, applied, target)
        for s in snaps:
            if abs(s - t_k) < 0.5 * scn.dt:
                result.snapshots[s] = copy.deepcopy(state)
        if k == scn.n_steps:
            break
        try:
            plant.step(scn.dt)
        except DomainExitError as exc:
            result.status, result.exit = "DomainExit", exc.event
            break
        except SolverError as exc:
            result.status, result.error = "SolverError", str(exc)
            break
    if result.exit is not None and trace.records:
        trace.records[-1].events.append(f"domain_exit_{result.exit.side}")
    result.snapshots["final"] = copy.deepcopy(plant.state)
    result.summary = _summarize(result)
    return result


def compare(scn: Scenario) -> tuple[RunResult, RunResult]:
    """Closed-loop and open-loop runs from the same initial data."""
    return run(scn, "backstepping"), run(scn, "open_loop")


SWEEPABLE = {
    "amplitude_scale": ("amplitude_scale",),
    "gain": ("k_f", "k_c"),
    "k_f": ("k_f",),
    "k_c": ("k_c",),
    "v_m": ("v_m",),
    "l0": ("l0",),
    "ramp_width": ("ramp_width",),
    "n_cells": ("n_cells",),
    "dt": ("dt",),
    "horizon": ("horizon",),
}


def _sweep_one(args):
    scn, policy = args
    try:
        return run(scn, policy)
    except (ConfigError, ValueError) as exc:
        return RunResult(scn, policy, MetricsTrace(), "SolverError", error=str(exc))


def sweep(scn: Scenario, parameter: str, values: Sequence, policy: str = "backstepping",
          workers: int = 1) -> dict:
    """Independent runs keyed by swept value; failures stay per-run."""
    if parameter not in SWEEPABLE:
        raise ValueError(f"{parameter!r} is not sweepable; choose from {sorted(SWEEPABLE)}")
    jobs = []
    for v in values:
        cast = int(v) if parameter == "n_cells" else float(v)
        try:
            s = replace(scn, **{name: cast for name in SWEEPABLE[parameter]}).validate()
        except ConfigError as exc:
            jobs.append((v, None, str(exc)))
            continue
        jobs.append((v, s, None))
    runnable = [(s, policy) for _, s, err in jobs if s is not None]
    if workers > 1 and len(runnable) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_sweep_one, runnable))
    else:
        outs = [_sweep_one(a) for a in runnable]
    it = iter(outs)
    results = {}
    for v, s, err in jobs:
        if s is None:
            results[v] = RunResult(scn, policy, MetricsTrace(), "SolverError", error=err)
        else:
            results[v] = next(it)
    return results


# ---------------------------------------------------------------- output

TRACE_COLUMNS = ("t_s", "l_m", "X_m", "u_in_veh_per_m", "u_out_veh_per_m", "V", "V1", "V2",
                 "V3", "V4", "V5", "h1_free", "h1_congested", "Z", "event")


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def write_trace_csv(result: RunResult, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in result.trace.records:
            w.writerow([_fmt(r.t), _fmt(r.l), _fmt(r.X), _fmt(r.u_in), _fmt(r.u_out),
                        _fmt(r.V), _fmt(r.V1), _fmt(r.V2), _fmt(r.V3), _fmt(r.V4), _fmt(r.V5),
                        _fmt(r.h1_free), _fmt(r.h1_congested), _fmt(r.Z), ";".join(r.events)])
    return path


def write_profile_csv(state: PlantState, fd: FundamentalDiagram, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("x_m", "rho_veh_per_km", "regime"))
        for fld, regime in ((state.free, "free"), (state.congested, "congested")):
            for x, rho in zip(fld.x, fld.values):
                w.writerow((_fmt(x), _fmt(rho / VEH_PER_KM), regime))
    return path


def write_comparison_csv(closed: RunResult, opened: RunResult, path) -> Path:
    path = Path(path)
    n = min(len(closed.trace), len(opened.trace))
    a, b = closed.trace.records, opened.trace.records
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t_s", "l_closed_m", "l_open_m", "u_in_closed_veh_per_m",
                    "u_out_closed_veh_per_m", "u_in_open_veh_per_m", "u_out_open_veh_per_m"))
        for i in range(n):
            w.writerow((_fmt(a[i].t), _fmt(a[i].l), _fmt(b[i].l), _fmt(a[i].u_in),
                        _fmt(a[i].u_out), _fmt(b[i].u_in), _fmt(b[i].u_out)))
    return path


def _round(x: Optional[float]) -> Optional[float]:
    return None if x is None else float(_fmt(x))


def write_summary(result: RunResult) -> dict:
    s = result.summary
    return {
        "policy": result.policy,
        "plant_mode": result.scenario.plant_mode,
        "status": result.status,
        "exit_side": result.exit.side if result.exit is not None else None,
        "exit_time_s": _round(s.exit_time) if s else None,
        "settle_time_s": _round(s.settle_time) if s else None,
        "max_abs_input_veh_per_m": s.max_abs_input if s else None,
        "sigma0_per_s": s.sigma0 if s else None,
        "r_squared": s.r_squared if s else None,
        "error": result.error,
    }
