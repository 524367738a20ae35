"""Bilateral backstepping boundary controls and boundary actuation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .history import InputHistory
from .plant import PlantState
from .traffic_core import DerivedParams, FundamentalDiagram, Setpoint, flux


@dataclass(frozen=True)
class ControlGains:
    k_f: float  # veh/m^2
    k_c: float  # veh/m^2
    a: float  # closed-loop interface decay rate b (k_f + k_c), 1/s

    @classmethod
    def from_gains(cls, k_f: float, k_c: float, b: float) -> ControlGains:
        if not (k_f > 0 and k_c > 0):
            raise ValueError(f"gains must be positive, got k_f={k_f}, k_c={k_c}")
        return cls(k_f, k_c, b * (k_f + k_c))


@dataclass(frozen=True)
class ControlInput:
    u_in: float  # veh/m, deviation at x = 0
    u_out: float  # veh/m, deviation at x = L
    t: float = 0.0


@dataclass(frozen=True)
class Saturation:
    side: str
    t: float
    requested: float
    applied: float


def delays(l: float, L: float, u: float) -> tuple[float, float]:
    """Transport times from each boundary to the interface."""
    if not 0.0 < l < L:
        raise ValueError(f"need 0 < l < L, got l={l}, L={L}")
    if not u > 0:
        raise ValueError(f"u must be positive, got {u}")
    return l / u, (L - l) / u


def _law(df, dc, l, L, X, gains, params):
    c = params.b / params.u
    u_in = gains.k_f * (X - c * df.integral(0.0, l) - c * dc.integral(l, min(L, 2.0 * l)))
    u_out = gains.k_c * (X - c * dc.integral(l, L) - c * df.integral(max(0.0, 2.0 * l - L), l))
    return np.array([u_in, u_out])


def backstepping_controls(state: PlantState, sp: Setpoint, gains: ControlGains,
                          params: DerivedParams) -> ControlInput:
    """Predictor feedback laws evaluated on the current fields.

    The cross integrals reach as far as the mirror image ``2l`` of the inlet
    (resp. ``2l - L`` of the outlet), clipped to the segment, so the
    ``l < L/2`` and ``l > L/2`` cases share one expression.
    """
    df = state.free.shifted(sp.rho_f_star)
    dc = state.congested.shifted(sp.rho_c_star)
    u_in, u_out = _law(df, dc, state.l, sp.L, state.l - sp.l_star, gains, params)
    return ControlInput(float(u_in), float(u_out), state.t)


def consistent_backstepping_controls(state: PlantState, sp: Setpoint, gains: ControlGains,
                                     params: DerivedParams) -> ControlInput:
    """Controls that reproduce themselves once written into the boundary nodes.

    On node-based fields the boundary samples enter the trapezoidal integrals
    of the law, so ``U = c + M v`` is affine in the boundary values ``v``;
    solving ``v = c + M v`` makes the transformed state vanish at both
    boundaries to rounding. Cell-centred fields carry no boundary sample and
    fall back to the plain law.
    """
    if state.free.centered:
        return backstepping_controls(state, sp, gains, params)
    df = state.free.shifted(sp.rho_f_star)
    dc = state.congested.shifted(sp.rho_c_star)
    X = state.l - sp.l_star

    def law(v_in, v_out):
        f = df.values.copy()
        c = dc.values.copy()
        f[0], c[-1] = v_in, v_out
        return _law(df.with_values(f), dc.with_values(c), state.l, sp.L, X, gains, params)

    base = law(0.0, 0.0)
    M = np.column_stack([law(1.0, 0.0) - base, law(0.0, 1.0) - base])
    v = np.linalg.solve(np.eye(2) - M, base)
    return ControlInput(float(v[0]), float(v[1]), state.t)


def open_loop_controls(hold: Optional[ControlInput] = None) -> ControlInput:
    """Uncontrolled boundaries: zero deviation, or the held t = 0 values if given."""
    if hold is None:
        return ControlInput(0.0, 0.0)
    return hold


def apply_boundary(state: PlantState, inp: ControlInput, sp: Setpoint,
                   fd: FundamentalDiagram, margin: float = 0.0,
                   in_history: Optional[InputHistory] = None,
                   out_history: Optional[InputHistory] = None):
    """Boundary densities for an input, clamped to stay inside their regimes.

    Returns ``(bc_in, bc_out, applied, events)`` where ``applied`` is the
    input actually realized and ``events`` lists Saturation records.
    """
    t = state.t
    events = []
    lo_f, hi_f = margin, fd.jump_density - margin
    lo_c, hi_c = fd.jump_density + margin, fd.rho_m - margin
    bc_in = sp.rho_f_star + inp.u_in
    bc_out = sp.rho_c_star + inp.u_out
    if not lo_f < bc_in < hi_f:
        clamped = min(max(bc_in, lo_f), hi_f)
        events.append(Saturation("in", t, inp.u_in, clamped - sp.rho_f_star))
        bc_in = clamped
    if not lo_c < bc_out < hi_c:
        clamped = min(max(bc_out, lo_c), hi_c)
        events.append(Saturation("out", t, inp.u_out, clamped - sp.rho_c_star))
        bc_out = clamped
    applied = replace(inp, u_in=bc_in - sp.rho_f_star, u_out=bc_out - sp.rho_c_star, t=t)
    if in_history is not None:
        in_history.append(t, applied.u_in)
    if out_history is not None:
        out_history.append(t, applied.u_out)
    return bc_in, bc_out, applied, events


def flux_actuation(inp: ControlInput, sp: Setpoint, fd: FundamentalDiagram) -> tuple[float, float]:
    """Ramp-metering flows realizing the boundary densities."""
    return flux(sp.rho_f_star + inp.u_in, fd), flux(sp.rho_c_star + inp.u_out, fd)
