"""Coupled free/congested density fields with a Rankine-Hugoniot interface.

Two realizations are provided:

* the linearized plant, solved exactly along characteristics from the two
  boundary-input histories (the interface is integrated with RK4);
* the nonlinear LWR plant, a first-order Godunov finite-volume scheme on two
  moving uniform grids that stretch with the interface (ALE form, so the
  remap onto the new grids is conservative by construction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np

from .fields import DensityField
from .history import InputHistory
from .traffic_core import DerivedParams, FundamentalDiagram, Setpoint

UPSTREAM = "upstream"
DOWNSTREAM = "downstream"


class SolverError(RuntimeError):
    pass


class NumericalStabilityError(SolverError):
    pass


class SolverBlowupError(SolverError):
    pass


@dataclass(frozen=True)
class Ok:
    def __bool__(self):
        return True


@dataclass(frozen=True)
class DomainExit:
    side: str
    t: float

    def __bool__(self):
        return False


class DomainExitError(RuntimeError):
    """Raised from inside a step when the interface leaves the segment."""

    def __init__(self, event: DomainExit):
        super().__init__(f"interface left the segment ({event.side}) at t={event.t:.4f} s")
        self.event = event


@dataclass(frozen=True)
class LinearizedCharacteristics:
    pass


@dataclass(frozen=True)
class NonlinearFiniteVolume:
    cfl: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.cfl <= 1.0:
            raise ValueError(f"cfl must lie in (0, 1], got {self.cfl}")


PlantMode = Union[LinearizedCharacteristics, NonlinearFiniteVolume]


@dataclass
class PlantState:
    free: DensityField  # absolute density on [0, l]
    congested: DensityField  # absolute density on [l, L]
    l: float
    t: float
    # cumulative vehicles through x = 0 and x = L (finite-volume audit)
    inflow: float = 0.0
    outflow: float = 0.0

    def __post_init__(self):
        if not (math.isclose(self.free.right, self.l, rel_tol=0, abs_tol=1e-9)
                and math.isclose(self.congested.left, self.l, rel_tol=0, abs_tol=1e-9)):
            raise ValueError("subdomains must meet at the interface")

    @property
    def L(self) -> float:
        return self.congested.right

    @property
    def n_cells(self) -> int:
        return self.free.n_cells


# ---------------------------------------------------------------- primitives


def interface_speed(rho_f_at_l, rho_c_at_l, fd: FundamentalDiagram):
    """Shock speed ``v_m - (v_m/rho_m)(rho_c + rho_f)``.

    For the quadratic flux this is the Rankine-Hugoniot quotient with the
    removable singularity at ``rho_c == rho_f`` filled in.
    """
    fd._check(rho_f_at_l)
    fd._check(rho_c_at_l)
    return fd.v_m - fd.b * (rho_c_at_l + rho_f_at_l)


def sample_density(state: PlantState, x):
    """Density at ``x``; the interface itself belongs to the free side.

    Use :func:`sample_interface_pair` for the two one-sided values at ``l``.
    """
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0.0) or np.any(xa > state.L):
        raise ValueError(f"x outside [0, {state.L}]")
    out = np.where(xa <= state.l, state.free.sample(xa), state.congested.sample(xa))
    return float(out) if out.ndim == 0 else out


def sample_interface_pair(state: PlantState) -> tuple[float, float]:
    return float(state.free.sample(state.l)), float(state.congested.sample(state.l))


def total_vehicles(state: PlantState) -> float:
    return state.free.total() + state.congested.total()


def exit_margin(L: float, n_cells: int) -> float:
    """Minimum distance kept between the interface and either boundary."""
    return L / (2 * n_cells)


def check_validity(state: PlantState, margin: Optional[float] = None):
    if margin is None:
        margin = exit_margin(state.L, state.n_cells)
    if state.l <= margin:
        return DomainExit(UPSTREAM, state.t)
    if state.l >= state.L - margin:
        return DomainExit(DOWNSTREAM, state.t)
    return Ok()


# ---------------------------------------------------------- initial profiles


@dataclass(frozen=True)
class SoftShock:
    """Initial deviations that swell smoothly toward the shock front.

    Far from the front each deviation equals its amplitude; within a few
    ``width`` of ``l0`` a tanh ramp doubles it.
    """

    amp_free: float  # veh/m
    amp_congested: float  # veh/m
    l0: float
    width: float

    def _ramp(self, s):
        return 0.5 * (1.0 + np.tanh(s / self.width))

    def free(self, x):
        return self.amp_free * (1.0 + self._ramp(np.asarray(x) - self.l0 + 3.0 * self.width))

    def congested(self, x):
        return self.amp_congested * (1.0 + self._ramp(self.l0 + 3.0 * self.width - np.asarray(x)))


def initial_state(profile: SoftShock, sp: Setpoint, n_cells: int,
                  centered: bool = False) -> PlantState:
    free = DensityField(np.zeros(n_cells + (0 if centered else 1)), 0.0, profile.l0, centered)
    cong = DensityField(np.zeros_like(free.values), profile.l0, sp.L, centered)
    free = free.with_values(sp.rho_f_star + profile.free(free.x))
    cong = cong.with_values(sp.rho_c_star + profile.congested(cong.x))
    return PlantState(free, cong, profile.l0, 0.0)


def state_from_deviations(dev_free: Callable, dev_congested: Callable, l: float, sp: Setpoint,
                          n_cells: int, t: float = 0.0, centered: bool = False) -> PlantState:
    """Node (or cell) samples of ``setpoint + deviation`` on both subdomains."""
    if not 0.0 < l < sp.L:
        raise ValueError(f"need 0 < l < L, got l={l}")
    free = DensityField(np.zeros(n_cells + (0 if centered else 1)), 0.0, l, centered)
    cong = DensityField(np.zeros_like(free.values), l, sp.L, centered)
    free = free.with_values(sp.rho_f_star + np.asarray(dev_free(free.x), dtype=float))
    cong = cong.with_values(sp.rho_c_star + np.asarray(dev_congested(cong.x), dtype=float))
    return PlantState(free, cong, l, t)


# ------------------------------------------------------------- linearized


def seed_histories(profile: SoftShock, sp: Setpoint, params: DerivedParams,
                   dt: float, horizon: Optional[float] = None) -> tuple[InputHistory, InputHistory]:
    """Histories whose negative-time prefix encodes the initial deviations.

    Along characteristics ``rho_f~(x, 0) = U_in(-x/u)`` and
    ``rho_c~(x, 0) = U_out(-(L - x)/u)``, so the initial profile is stored
    as fictitious past inputs and the field formula holds for all ``t >= 0``.
    """
    u, L = params.u, sp.L
    if horizon is None:
        horizon = 2.0 * L / u
    n_back = int(math.ceil(1.05 * L / u / dt))
    s = -dt * np.arange(n_back, -1, -1)
    h_in, h_out = InputHistory(horizon), InputHistory(horizon)
    h_in.extend(s, profile.free(-u * s))
    h_out.extend(s, profile.congested(L + u * s))
    return h_in, h_out


def characteristic_fields(l: float, t: float, in_history: InputHistory,
                          out_history: InputHistory, params: DerivedParams,
                          sp: Setpoint, n_cells: int) -> tuple[DensityField, DensityField]:
    u, L = params.u, sp.L
    xf = np.linspace(0.0, l, n_cells + 1)
    xc = np.linspace(l, L, n_cells + 1)
    free = DensityField(sp.rho_f_star + in_history(t - xf / u), 0.0, l)
    cong = DensityField(sp.rho_c_star + out_history(t - (L - xc) / u), l, L)
    return free, cong


def linearized_interface_rate(tau: float, l: float, in_history: InputHistory,
                              out_history: InputHistory, params: DerivedParams,
                              sp: Setpoint) -> float:
    u = params.u
    rf = in_history(tau - l / u)
    rc = out_history(tau - (sp.L - l) / u)
    return -params.b * (rf + rc)


def step_linearized(state: PlantState, in_history: InputHistory, out_history: InputHistory,
                    dt: float, params: DerivedParams, sp: Setpoint) -> PlantState:
    """Advance the linearized plant by ``dt``.

    The interface moves by classical RK4 on ``X' = -b(rho_f~(l) + rho_c~(l))``
    with the interface densities read off the characteristics at stage times;
    the fields are then rebuilt exactly from the histories.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    t, l = state.t, state.l

    def rate(tau, ll):
        return linearized_interface_rate(tau, ll, in_history, out_history, params, sp)

    k1 = rate(t, l)
    k2 = rate(t + 0.5 * dt, l + 0.5 * dt * k1)
    k3 = rate(t + 0.5 * dt, l + 0.5 * dt * k2)
    k4 = rate(t + dt, l + dt * k3)
    l_new = l + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    t_new = t + dt
    if not 0.0 < l_new < sp.L:
        side = UPSTREAM if l_new <= 0.0 else DOWNSTREAM
        raise DomainExitError(DomainExit(side, t_new))
    free, cong = characteristic_fields(l_new, t_new, in_history, out_history, params, sp,
                                       state.n_cells)
    return PlantState(free, cong, l_new, t_new)


# -------------------------------------------------------------- nonlinear


def _godunov(rho_left, rho_right, sigma, fd: FundamentalDiagram):
    """Godunov flux for ``f(r) = Q(r) - sigma r`` (concave) across a face moving at ``sigma``."""
    b = fd.b

    def f(r):
        return fd.v_m * r - b * r * r - sigma * r

    crit = (fd.v_m - sigma) / (2.0 * b)
    lo = np.minimum(rho_left, rho_right)
    hi = np.maximum(rho_left, rho_right)
    rising = np.minimum(f(rho_left), f(rho_right))
    falling = f(np.clip(crit, lo, hi))
    return np.where(rho_left <= rho_right, rising, falling)


MAX_SUBSTEPS = 100_000


def step_nonlinear(state: PlantState, bc_in: float, bc_out: float, dt: float,
                   fd: FundamentalDiagram, cfl: float) -> PlantState:
    """Advance the nonlinear plant by ``dt`` with CFL-limited Euler sub-steps.

    Each sub-step moves the interface with the one-sided adjacent cell
    densities and updates cell masses with fluxes measured relative to the
    moving faces, which keeps the scheme exactly conservative: the mass the
    free side loses through the interface is what the congested side gains.
    """
    if not state.free.centered:
        raise ValueError("finite-volume step needs cell-centred fields")
    if not 0.0 < cfl <= 1.0:
        raise ValueError(f"cfl must lie in (0, 1], got {cfl}")
    L = state.L
    n = state.n_cells
    rf = state.free.values.copy()
    rc = state.congested.values.copy()
    l, t = state.l, state.t
    inflow, outflow = state.inflow, state.outflow
    frac = np.arange(n + 1) / n
    remaining = dt
    substeps = 0
    while remaining > 1e-14 * dt:
        s = fd.v_m - fd.b * (rf[-1] + rc[0])
        h_f, h_c = l / n, (L - l) / n
        wave = max(np.max(np.abs(fd.v_m - 2.0 * fd.b * rf)),
                   np.max(np.abs(fd.v_m - 2.0 * fd.b * rc))) + abs(s)
        dt_max = cfl * min(h_f, h_c) / wave
        substeps += 1
        if substeps > MAX_SUBSTEPS or dt_max < 1e-12:
            raise NumericalStabilityError(
                f"CFL sub-step cap exceeded at t={t:.4f} s (dt_max={dt_max:.3g} s)"
            )
        k = remaining / math.ceil(remaining / dt_max - 1e-9)

        sig_f = frac * s
        flux_f = np.empty(n + 1)
        flux_f[0] = _godunov(bc_in, rf[0], 0.0, fd)
        flux_f[1:n] = _godunov(rf[:-1], rf[1:], sig_f[1:n], fd)
        flux_f[n] = fd.v_m * rf[-1] - fd.b * rf[-1] ** 2 - s * rf[-1]

        sig_c = (1.0 - frac) * s
        flux_c = np.empty(n + 1)
        flux_c[0] = fd.v_m * rc[0] - fd.b * rc[0] ** 2 - s * rc[0]
        flux_c[1:n] = _godunov(rc[:-1], rc[1:], sig_c[1:n], fd)
        flux_c[n] = _godunov(rc[-1], bc_out, 0.0, fd)

        mass_f = h_f * rf + k * (flux_f[:-1] - flux_f[1:])
        mass_c = h_c * rc + k * (flux_c[:-1] - flux_c[1:])
        l = l + k * s
        t = t + k
        inflow += k * flux_f[0]
        outflow += k * flux_c[n]
        remaining -= k
        if not 0.0 < l < L:
            raise DomainExitError(DomainExit(UPSTREAM if l <= 0.0 else DOWNSTREAM, t))
        rf = mass_f / (l / n)
        rc = mass_c / ((L - l) / n)
        if (np.any(rf < 0) or np.any(rf > fd.rho_m) or np.any(rc < 0)
                or np.any(rc > fd.rho_m) or not np.all(np.isfinite(rf))
                or not np.all(np.isfinite(rc))):
            raise SolverBlowupError(f"density left [0, rho_m] at t={t:.4f} s")
    t = state.t + dt
    free = DensityField(rf, 0.0, l, centered=True)
    cong = DensityField(rc, l, L, centered=True)
    return PlantState(free, cong, l, t, inflow, outflow)


# ---------------------------------------------------------- plant drivers


class LinearizedPlant:
    """Single-owner linearized plant holding its two input histories."""

    mode = LinearizedCharacteristics()

    def __init__(self, profile: SoftShock, sp: Setpoint, fd: FundamentalDiagram,
                 params: DerivedParams, n_cells: int, dt: float):
        self.sp, self.fd, self.params = sp, fd, params
        self.n_cells = n_cells
        self.in_history, self.out_history = seed_histories(profile, sp, params, dt)
        free, cong = characteristic_fields(profile.l0, 0.0, self.in_history, self.out_history,
                                           params, sp, n_cells)
        self.state = PlantState(free, cong, profile.l0, 0.0)
        self.initial_inputs = (float(profile.free(0.0)), float(profile.congested(sp.L)))

    def apply(self, t: float, u_in: float, u_out: float) -> None:
        self.in_history.append(t, u_in)
        self.out_history.append(t, u_out)
        free, cong = characteristic_fields(self.state.l, self.state.t, self.in_history,
                                           self.out_history, self.params, self.sp, self.n_cells)
        self.state = replace(self.state, free=free, congested=cong)

    def step(self, dt: float) -> PlantState:
        self.state = step_linearized(self.state, self.in_history, self.out_history, dt,
                                     self.params, self.sp)
        return self.state


class NonlinearPlant:
    """Single-owner finite-volume plant; boundary densities are held between steps."""

    def __init__(self, profile: SoftShock, sp: Setpoint, fd: FundamentalDiagram,
                 params: DerivedParams, n_cells: int, cfl: float = 0.9):
        self.sp, self.fd, self.params = sp, fd, params
        self.mode = NonlinearFiniteVolume(cfl)
        self.state = initial_state(profile, sp, n_cells, centered=True)
        self.initial_inputs = (float(profile.free(0.0)), float(profile.congested(sp.L)))
        self._bc = (sp.rho_f_star + self.initial_inputs[0], sp.rho_c_star + self.initial_inputs[1])

    def apply(self, t: float, u_in: float, u_out: float) -> None:
        self._bc = (self.sp.rho_f_star + u_in, self.sp.rho_c_star + u_out)

    def step(self, dt: float) -> PlantState:
        self.state = step_nonlinear(self.state, self._bc[0], self._bc[1], dt, self.fd,
                                    self.mode.cfl)
        return self.state
