"""Cross-module property suite with fixed seeds and a fault-injection hook.

Each check is named after the invariant it exercises. ``validate`` runs
them all (or a chosen subset) and returns a report; the CLI maps a failing
report to a nonzero exit status.
"""

from __future__ import annotations

import io
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import control, transform
from .diagnostics import LyapunovWeights, validity_implication_holds
from .experiment import (
    Scenario,
    _fmt,
    make_plant,
    run,
    scenario_from_mapping,
    write_trace_csv,
)
from .plant import (
    LinearizedPlant,
    NonlinearPlant,
    SoftShock,
    interface_speed,
    state_from_deviations,
    total_vehicles,
)
from .traffic_core import (
    VEH_PER_KM,
    FundamentalDiagram,
    characteristic_speed,
    flux,
    matched_setpoint,
    validate_setpoint,
)

EPS = np.finfo(float).eps


@dataclass(frozen=True)
class CheckResult:
    module: str
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.module}.{self.name}: {self.detail}"


@dataclass
class ValidationReport:
    seed: int
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.results]

    def text(self) -> str:
        lines = [r.line() for r in self.results]
        n_ok = sum(r.passed for r in self.results)
        lines.append(f"{n_ok}/{len(self.results)} checks passed (seed {self.seed})")
        return "\n".join(lines)


@dataclass
class Operators:
    """Implementations under test; swap one in to inject a fault."""

    forward_transform: Callable = transform.forward_transform
    inverse_transform: Callable = transform.inverse_transform
    backstepping_controls: Callable = control.backstepping_controls


class Context:
    def __init__(self, seed: int, ops: Operators):
        self.seed = seed
        self.ops = ops
        self.scn = Scenario()
        self._cache: dict = {}

    def rng(self, salt: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, salt])

    def cached(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]


CHECKS: list[tuple[str, str, Callable]] = []


def check(module: str):
    def deco(fn):
        CHECKS.append((module, fn.__name__, fn))
        return fn
    return deco


def check_names() -> list[str]:
    return [name for _, name, _ in CHECKS]


def smooth_deviation(rng: np.random.Generator, L: float, amp: float, modes: int = 4):
    """Random band-limited function on [0, L] with sup norm at most ``amp``."""
    k = np.arange(1, modes + 1)
    c = rng.uniform(-1.0, 1.0, modes) / k
    phase = rng.uniform(0.0, 2.0 * np.pi, modes)
    scale = amp * rng.uniform(0.2, 1.0) / np.sum(np.abs(c))

    def f(x):
        x = np.asarray(x, dtype=float)[..., None]
        return scale * np.sum(c * np.sin(np.pi * k * x / L + phase), axis=-1)
    return f


# ------------------------------------------------------------- traffic core


@check("traffic_core")
def flux_symmetry(ctx: Context):
    fd = ctx.scn.fd
    rho = ctx.rng(1).uniform(0.0, fd.rho_m, 2000)
    err = np.max(np.abs(flux(rho, fd) - flux(fd.rho_m - rho, fd)))
    tol = 8 * EPS * fd.v_m * fd.rho_m / 4
    return err <= tol, f"max |Q(r) - Q(rho_m - r)| = {err:.2e} (tol {tol:.1e})"


@check("traffic_core")
def characteristic_speed_antisymmetry(ctx: Context):
    fd = ctx.scn.fd
    rf = ctx.rng(2).uniform(0.0, fd.jump_density, 2000)
    err = np.max(np.abs(characteristic_speed(rf, fd) + characteristic_speed(fd.rho_m - rf, fd)))
    tol = 8 * EPS * fd.v_m
    return err <= tol, f"max |Q'(rf) + Q'(rho_m - rf)| = {err:.2e} m/s"


@check("traffic_core")
def matched_setpoint_validity(ctx: Context):
    fd, L = ctx.scn.fd, ctx.scn.L
    rng = ctx.rng(3)
    bad = 0
    for _ in range(500):
        rf = rng.uniform(1e-6, fd.jump_density * (1 - 1e-9))
        sp = matched_setpoint(rf, rng.uniform(1e-6, L * (1 - 1e-9)), L, fd)
        try:
            validate_setpoint(sp, fd)
        except ValueError:
            bad += 1
    return bad == 0, f"{500 - bad}/500 random setpoints satisfy md1-md3"


@check("traffic_core")
def flux_derivative_exact(ctx: Context):
    fd = ctx.scn.fd
    h = 1e-4 * fd.rho_m
    rho = ctx.rng(4).uniform(h, fd.rho_m - h, 2000)
    fdq = (flux(rho + h, fd) - flux(rho - h, fd)) / (2 * h)
    err = np.max(np.abs(characteristic_speed(rho, fd) - fdq))
    tol = 1e-8 * fd.v_m
    return err <= tol, f"max |Q' - central difference| = {err:.2e} m/s (rounding only)"


# -------------------------------------------------------------------- plant


@check("plant")
def equilibrium_fixed_point(ctx: Context):
    scn = ctx.scn
    sp, fd, params = scn.setpoint, scn.fd, scn.params
    flat = SoftShock(0.0, 0.0, sp.l_star, scn.ramp_width)
    lin = LinearizedPlant(flat, sp, fd, params, 100, scn.dt)
    fv = NonlinearPlant(flat, sp, fd, params, 100, scn.cfl)
    worst = 0.0
    for plant in (lin, fv):
        for k in range(200):
            plant.apply(plant.state.t, 0.0, 0.0)
            plant.step(scn.dt)
        s = plant.state
        worst = max(worst,
                    np.max(np.abs(s.free.values - sp.rho_f_star)) / fd.rho_m,
                    np.max(np.abs(s.congested.values - sp.rho_c_star)) / fd.rho_m,
                    abs(s.l - sp.l_star) / sp.L)
    return worst <= 1e-13, f"largest relative drift over 200 steps, both backends: {worst:.1e}"


def _open_loop_l(scn: Scenario) -> tuple[np.ndarray, np.ndarray]:
    res = run(scn, "open_loop")
    return res.trace.t, res.trace.column("l")


@check("plant")
def backend_agreement(ctx: Context):
    # 1% of the default amplitudes keeps deviations well under 2% of rho_m
    base = replace(ctx.scn, amplitude_scale=0.01, dt=0.05, cfl=0.3, horizon=30.0)
    t_ref, l_ref = _open_loop_l(replace(base, n_cells=100))
    errs = []
    for n in (50, 100):
        t, l = _open_loop_l(replace(base, plant_mode="nonlinear", n_cells=n))
        m = min(len(t), len(t_ref))
        errs.append(float(np.max(np.abs(l[:m] - l_ref[:m]))))
    ratio = errs[0] / errs[1] if errs[1] > 0 else math.inf
    ok = 1.5 <= ratio <= 2.5
    return ok, f"max |l_fv - l_lin| {errs[0]:.3e} -> {errs[1]:.3e} m, ratio {ratio:.2f}"


@check("plant")
def discrete_conservation(ctx: Context):
    scn = replace(ctx.scn, plant_mode="nonlinear", n_cells=100, horizon=10.0)
    plant = make_plant(scn)
    n0 = total_vehicles(plant.state)
    res = run(scn, "backstepping", plant=plant)
    s = plant.state
    drift = abs(total_vehicles(s) - n0 - s.inflow + s.outflow) / n0
    return res.completed and drift <= 1e-10, (
        f"|N(t) - N(0) - in + out| / N(0) = {drift:.1e} after {s.t:.0f} s")


@check("plant")
def interface_speed_sign(ctx: Context):
    fd = ctx.scn.fd
    rng = ctx.rng(5)
    rf = rng.uniform(0.0, fd.rho_m, 5000)
    rc = fd.rho_m - rf + rng.uniform(1e-9, 1.0, 5000) * rf
    rc = np.minimum(rc, fd.rho_m)
    keep = rf + rc > fd.rho_m
    s = np.array([interface_speed(a, b, fd) for a, b in zip(rf[keep], rc[keep])])
    return bool(np.all(s < 0)), f"{int(np.sum(s < 0))}/{len(s)} congested-heavy pairs move upstream"


def _closed_loop_probe(ctx: Context):
    """Default closed loop over 15 s with per-step delay and boundary data."""
    def make():
        scn = replace(ctx.scn, horizon=15.0)
        sp, gains, params = scn.setpoint, scn.gains, scn.params
        plant = make_plant(scn)
        u = params.u
        rows = []

        def obs(state, applied, target):
            l, t = state.l, state.t
            df, dc, X = transform.deviations(state, sp)
            tg = ctx.ops.forward_transform(state, sp, gains, params)
            rows.append((
                float(df.sample(l)), float(plant.in_history(t - l / u)),
                float(dc.sample(l)), float(plant.out_history(t - (sp.L - l) / u)),
                float(tg.w_f.values[0]), float(tg.w_c.values[-1]),
                float(tg.w_f.values[-1] - df.values[-1] + gains.k_f * X),
                float(tg.w_c.values[0] - dc.values[0] + gains.k_c * X),
            ))
        res = run(scn, "backstepping", observer=obs, plant=plant)
        return res, np.array(rows)
    return ctx.cached("closed_probe", make)


@check("plant")
def delay_identity(ctx: Context):
    res, rows = _closed_loop_probe(ctx)
    scale = max(np.max(np.abs(rows[:, [1, 3]])), 1e-300)
    err_f = np.max(np.abs(rows[:, 0] - rows[:, 1])) / scale
    err_c = np.max(np.abs(rows[:, 2] - rows[:, 3])) / scale
    ok = res.completed and err_f <= 1e-6 and err_c <= 1e-6
    return ok, f"relative mismatch free {err_f:.1e}, congested {err_c:.1e} over {len(rows)} steps"


# ------------------------------------------------------------------ control


def _controls(ctx: Context, dev_f, dev_c, l, sp, n):
    scn = ctx.scn
    st = state_from_deviations(dev_f, dev_c, l, sp, n)
    return ctx.ops.backstepping_controls(st, sp, scn.gains, scn.params)


@check("control")
def branch_continuity(ctx: Context):
    scn = ctx.scn
    sp = scn.setpoint
    rng = ctx.rng(6)
    amp = 0.02 * scn.rho_m
    f, c = smooth_deviation(rng, scn.L, amp), smooth_deviation(rng, scn.L, amp)
    half = scn.L / 2
    u0 = _controls(ctx, f, c, half, sp, 2000)
    gaps = []
    for eps in (1e-1, 1e-2, 1e-3):
        d = 0.0
        for l in (half - eps, half + eps):
            ui = _controls(ctx, f, c, l, sp, 2000)
            d = max(d, abs(ui.u_in - u0.u_in), abs(ui.u_out - u0.u_out))
        gaps.append(d)
    ok = gaps[2] < gaps[0] and gaps[2] <= 0.05 * gaps[0]
    return ok, "jump at L/2 +- eps (0.1, 0.01, 0.001 m): " + ", ".join(f"{g:.2e}" for g in gaps)


@check("control")
def control_linearity(ctx: Context):
    scn = ctx.scn
    fd, L = scn.fd, scn.L
    rng = ctx.rng(7)
    l = 260.0
    worst = 0.0
    for _ in range(20):
        amp = 0.02 * scn.rho_m
        f1, c1, f2, c2 = (smooth_deviation(rng, L, amp) for _ in range(4))
        x1, x2 = rng.uniform(-30, 30, 2)
        a, b = rng.uniform(-1, 1, 2)

        def sp_for(X):
            return matched_setpoint(scn.rho_f_star, l - X, L, fd)
        u1 = _controls(ctx, f1, c1, l, sp_for(x1), 300)
        u2 = _controls(ctx, f2, c2, l, sp_for(x2), 300)
        u12 = _controls(ctx, lambda x: a * f1(x) + b * f2(x), lambda x: a * c1(x) + b * c2(x),
                        l, sp_for(a * x1 + b * x2), 300)
        scale = abs(a * u1.u_in) + abs(b * u2.u_in) + abs(a * u1.u_out) + abs(b * u2.u_out)
        err = max(abs(u12.u_in - a * u1.u_in - b * u2.u_in),
                  abs(u12.u_out - a * u1.u_out - b * u2.u_out)) / scale
        worst = max(worst, err)
    return worst <= 1e-9, f"worst relative superposition defect over 20 draws: {worst:.1e}"


@check("control")
def quadrature_convergence(ctx: Context):
    scn = ctx.scn
    sp, gains, params = scn.setpoint, scn.gains, scn.params
    L, c = sp.L, params.b / params.u
    s = 60.0
    af, ac = 0.01 * scn.rho_m, -0.01 * scn.rho_m

    def prim(x):
        return s * np.sin(x / s)
    ratios = []
    for l in (150.0, 330.0):
        X = l - sp.l_star
        exact_in = gains.k_f * (X - c * af * (prim(l) - prim(0)) - c * ac * (prim(min(L, 2 * l)) - prim(l)))
        exact_out = gains.k_c * (X - c * ac * (prim(L) - prim(l))
                                 - c * af * (prim(l) - prim(max(0.0, 2 * l - L))))
        errs = []
        for n in (50, 100, 200):
            u = _controls(ctx, lambda x: af * np.cos(x / s), lambda x: ac * np.cos(x / s), l, sp, n)
            errs.append(max(abs(u.u_in - exact_in), abs(u.u_out - exact_out)))
        ratios += [errs[0] / errs[1], errs[1] / errs[2]]
    ok = all(3.5 <= r <= 4.5 for r in ratios)
    return ok, "error ratios under halving: " + ", ".join(f"{r:.2f}" for r in ratios)


@check("control")
def delay_ordering(ctx: Context):
    scn = ctx.scn
    L, u = scn.L, scn.params.u
    ls = ctx.rng(8).uniform(1e-6, L - 1e-6, 5000)
    agree = sum(np.sign(np.subtract(*control.delays(l, L, u))) == np.sign(l - L / 2) for l in ls)
    return agree == len(ls), f"{agree}/{len(ls)} positions order the delays by sign(l - L/2)"


# ---------------------------------------------------------------- transform


@check("backstepping_xform")
def round_trip_identity(ctx: Context):
    scn = ctx.scn
    sp, gains, params = scn.setpoint, scn.gains, scn.params
    rng = ctx.rng(9)
    worst = 0.0
    for _ in range(100):
        amp = 0.05 * scn.rho_m
        l = rng.uniform(0.05, 0.95) * sp.L
        st = state_from_deviations(smooth_deviation(rng, sp.L, amp),
                                   smooth_deviation(rng, sp.L, amp), l, sp, 400)
        tg = ctx.ops.forward_transform(st, sp, gains, params)
        rf, rc, X = ctx.ops.inverse_transform(tg, sp, gains, params)
        df, dc, X0 = transform.deviations(st, sp)
        scale = max(np.max(np.abs(df.values)), np.max(np.abs(dc.values)))
        err = max(np.max(np.abs(rf.values - df.values)), np.max(np.abs(rc.values - dc.values))) / scale
        err = max(err, abs(X - X0) / max(abs(X0), 1e-300))
        worst = max(worst, err)
    return worst <= 1e-8, f"worst relative round-trip error over 100 fields: {worst:.1e}"


@check("backstepping_xform")
def boundary_annihilation(ctx: Context):
    res, rows = _closed_loop_probe(ctx)
    worst = float(np.max(np.abs(rows[:, 4:6])))
    tol = 1e-10 * ctx.scn.rho_m
    return res.completed and worst <= tol, f"max |w_f(0)|, |w_c(L)| = {worst:.1e} veh/m (tol {tol:.0e})"


@check("backstepping_xform")
def interface_relations(ctx: Context):
    res, rows = _closed_loop_probe(ctx)
    worst = float(np.max(np.abs(rows[:, 6:8])))
    tol = 1e-12 * ctx.scn.rho_m
    return res.completed and worst <= tol, f"max |w(l) - rho~(l) + K X| = {worst:.1e} veh/m"


@check("backstepping_xform")
def residual_convergence(ctx: Context):
    scn = ctx.scn
    t0 = 2.0 * scn.L / scn.params.u + 1.0  # fields free of start-up history
    reports = []
    for n, dt in ((100, 0.02), (200, 0.01)):
        s = replace(scn, n_cells=n, dt=dt, horizon=t0 + 1.0)
        traj = []
        run(s, "backstepping", observer=lambda st, a, _tg: traj.append((st, a)) if st.t >= t0 - 1e-9 else None)
        reports.append(transform.target_residual(traj, s.gains, s.params, s.setpoint))
    keys = ("pde_free", "pde_congested", "rms_pde_free", "rms_pde_congested")
    ratios = [getattr(reports[0], k) / max(getattr(reports[1], k), 1e-300) for k in keys]
    ok = all(r >= 1.5 for r in ratios)
    return ok, "interior norm ratios under (dt, dx) halving: " + ", ".join(f"{r:.1f}" for r in ratios)


# -------------------------------------------------------------- diagnostics


def _amplitude_sweep(ctx: Context):
    def make():
        out = {}
        for a in (1.0, 0.5, 0.25, 0.125):
            out[a] = run(replace(ctx.scn, amplitude_scale=a, n_cells=100, dt=0.02, horizon=30.0))
        return out
    return ctx.cached("amp_sweep", make)


@check("diagnostics")
def definition_audit(ctx: Context):
    res, _ = _closed_loop_probe(ctx)
    audit = res.trace.audit()
    scale = float(np.max(res.trace.column("V")))
    return audit <= 1e-12 * scale, f"max |V - sum of parts| = {audit:.1e} (V up to {scale:.3g})"


def _monotone_after(res, t_after: float = 2.0) -> bool:
    t, V = res.trace.t, res.trace.column("V")
    V = V[t >= t_after]
    return bool(np.all(np.diff(V) <= 1e-12 * V[:-1]))


@check("diagnostics")
def monotone_decay_small_data(ctx: Context):
    sweep = _amplitude_sweep(ctx)
    amps = sorted(sweep)
    holds = [_monotone_after(sweep[a]) for a in amps]
    # must hold at the smallest amplitude and on a downward-closed set
    first_fail = holds.index(False) if False in holds else len(holds)
    ok = holds[0] and all(not h for h in holds[first_fail:])
    listing = ", ".join(f"{a:g}:{'yes' if h else 'no'}" for a, h in zip(amps, holds))
    return ok, f"V non-increasing after 2 s by amplitude scale: {listing}"


@check("diagnostics")
def lambda_constraint_guard(ctx: Context):
    w = ctx.scn.weights
    try:
        LyapunovWeights(0.5 * w.lower_bound, w.lower_bound)
    except ValueError:
        rejected = True
    else:
        rejected = False
    return rejected, "lambda below 4b/(au) rejected" if rejected else "lambda below bound accepted"


@check("diagnostics")
def validity_implication(ctx: Context):
    sweep = _amplitude_sweep(ctx)
    sp = ctx.scn.setpoint
    ok = all(validity_implication_holds(r.trace, sp) for r in sweep.values())
    return ok, f"implication holds on all {len(sweep)} amplitude-sweep traces"


# --------------------------------------------------------------- experiment


@check("experiment_cli")
def determinism(ctx: Context):
    scn = replace(ctx.scn, horizon=3.0)
    with tempfile.TemporaryDirectory() as d:
        a = write_trace_csv(run(scn), Path(d) / "a.csv").read_bytes()
        b = write_trace_csv(run(scn), Path(d) / "b.csv").read_bytes()
    return a == b, f"two runs give identical CSV bytes ({len(a)} bytes)" if a == b else "CSV bytes differ"


@check("experiment_cli")
def config_echo_completeness(ctx: Context):
    log = logging.getLogger("shockctl.experiment")
    buf = io.StringIO()
    handler = logging.StreamHandler(buf)
    old = log.level
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        scenario_from_mapping({"setpoint": {"l_star_m": "200"}, "run": {"horizon_s": "60"}})
    finally:
        log.removeHandler(handler)
        log.setLevel(old)
    lines = buf.getvalue().splitlines()
    names = [ln.split()[1] for ln in lines if ln.startswith("default ")]
    expected = {f for f in Scenario.__dataclass_fields__} - {"l_star", "horizon"}
    ok = sorted(names) == sorted(expected)
    return ok, f"{len(names)} defaults echoed, {len(expected)} expected, each once" if ok else (
        f"echoed {sorted(names)} vs expected {sorted(expected)}")


@check("experiment_cli")
def figure_data_fidelity(ctx: Context):
    from .report import compare_with_residual, write_compare_report

    scn = replace(ctx.scn, horizon=4.0, snapshot_times=(0.0,))
    closed, opened, residual = compare_with_residual(scn)
    with tempfile.TemporaryDirectory() as d:
        files = write_compare_report(closed, opened, d, residual)
        cmp_rows = np.genfromtxt(files["comparison"], delimiter=",", names=True)
        prof0 = np.genfromtxt(Path(d) / "closed_profile_t0s.csv", delimiter=",", names=True,
                              dtype=None, encoding=None)
        figs = all(Path(files[k]).stat().st_size > 0
                   for k in ("fig_interface", "fig_inputs", "fig_profiles"))
    n = min(len(closed.trace), len(opened.trace))
    checks = [
        np.array_equal(cmp_rows["l_closed_m"], [float(_fmt(v)) for v in closed.trace.column("l")[:n]]),
        np.array_equal(cmp_rows["l_open_m"], [float(_fmt(v)) for v in opened.trace.column("l")[:n]]),
        np.array_equal(cmp_rows["u_in_closed_veh_per_m"],
                       [float(_fmt(v)) for v in closed.trace.column("u_in")[:n]]),
        np.array_equal(cmp_rows["u_out_closed_veh_per_m"],
                       [float(_fmt(v)) for v in closed.trace.column("u_out")[:n]]),
    ]
    s0 = closed.snapshots[0.0]
    rho0 = np.concatenate((s0.free.values, s0.congested.values)) / VEH_PER_KM
    checks.append(np.array_equal(prof0["rho_veh_per_km"], [float(_fmt(v)) for v in rho0]))
    ok = all(checks) and figs
    return ok, f"{sum(checks)}/{len(checks)} plotted series match the written files; figures written: {figs}"


# ------------------------------------------------------------------- driver


def validate(seed: int = 0, ops: Optional[Operators] = None,
             only: Optional[Iterable[str]] = None,
             progress: Optional[Callable[[CheckResult], None]] = None) -> ValidationReport:
    ctx = Context(seed, ops or Operators())
    wanted = None if only is None else set(only)
    if wanted is not None:
        unknown = wanted - set(check_names())
        if unknown:
            raise ValueError(f"unknown checks: {sorted(unknown)}")
    report = ValidationReport(seed)
    for module, name, fn in CHECKS:
        if wanted is not None and name not in wanted:
            continue
        start = time.perf_counter()
        try:
            ok, detail = fn(ctx)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        res = CheckResult(module, name, bool(ok), detail, time.perf_counter() - start)
        report.results.append(res)
        if progress is not None:
            progress(res)
    return report
