"""Lyapunov functional, H1 norms, the stability metric Z and decay fits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .control import ControlGains
from .fields import DensityField
from .plant import PlantState
from .traffic_core import DerivedParams, Setpoint
from .transform import TargetState


@dataclass(frozen=True)
class LyapunovWeights:
    lam: float
    lower_bound: float = 0.0  # 4b/(a u); lam must exceed it

    def __post_init__(self):
        if not self.lam > self.lower_bound:
            raise ValueError(f"lambda={self.lam} must exceed 4b/(au)={self.lower_bound}")

    @classmethod
    def for_gains(cls, gains: ControlGains, params: DerivedParams,
                  lam: Optional[float] = None) -> LyapunovWeights:
        bound = 4.0 * params.b / (gains.a * params.u)
        return cls(2.0 * bound if lam is None else lam, bound)


def _weighted_total(fld: DensityField, weight: np.ndarray, values: np.ndarray) -> float:
    return fld.with_values(weight * values).total()


def lyapunov(target: TargetState, weights: LyapunovWeights) -> tuple[float, ...]:
    """``(V, V1, V2, V3, V4, V5)`` with exponential spatial weights.

    ``V1, V3`` weight the free side by ``exp(-x)``, ``V2, V4`` the congested
    side by ``exp(x - L)``; ``x`` is in metres.
    """
    wf, wc = target.w_f, target.w_c
    ef = np.exp(-wf.x)
    ec = np.exp(wc.x - target.L)
    v1 = _weighted_total(wf, ef, wf.values ** 2)
    v2 = _weighted_total(wc, ec, wc.values ** 2)
    v3 = _weighted_total(wf, ef, wf.gradient() ** 2)
    v4 = _weighted_total(wc, ec, wc.gradient() ** 2)
    v5 = target.x_dev ** 2
    v = v1 + v2 + weights.lam * v3 + weights.lam * v4 + v5
    return v, v1, v2, v3, v4, v5


def h1_norm(fld: DensityField) -> float:
    if len(fld.values) < 3:
        raise ValueError("H1 norm needs at least 3 samples")
    return float(np.sqrt(fld.with_values(fld.values ** 2 + fld.gradient() ** 2).total()))


def z_metric(state: PlantState, sp: Setpoint) -> float:
    """Unsquared H1 deviations of both fields plus the squared interface error."""
    return (h1_norm(state.free.shifted(sp.rho_f_star))
            + h1_norm(state.congested.shifted(sp.rho_c_star))
            + (state.l - sp.l_star) ** 2)


@dataclass
class MetricsRecord:
    t: float
    V: float
    V1: float
    V2: float
    V3: float
    V4: float
    V5: float
    h1_free: float
    h1_congested: float
    Z: float
    l: float
    X: float
    u_in: float
    u_out: float
    events: list = field(default_factory=list)


@dataclass
class MetricsTrace:
    records: list = field(default_factory=list)
    lam: float = 1.0

    def append(self, rec: MetricsRecord) -> None:
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    def audit(self) -> float:
        """Largest mismatch between stored V and its recomputed weighted sum."""
        if not self.records:
            return 0.0
        return max(abs(r.V - (r.V1 + r.V2 + self.lam * r.V3 + self.lam * r.V4 + r.V5))
                   for r in self.records)


def record_metrics(state: PlantState, target: TargetState, weights: LyapunovWeights,
                   sp: Setpoint, u_in: float, u_out: float, events=()) -> MetricsRecord:
    v = lyapunov(target, weights)
    hf = h1_norm(state.free.shifted(sp.rho_f_star))
    hc = h1_norm(state.congested.shifted(sp.rho_c_star))
    X = state.l - sp.l_star
    return MetricsRecord(state.t, *v, hf, hc, hf + hc + X ** 2, state.l, X, u_in, u_out,
                         list(events))


def decay_rate_fit(trace, window: Optional[tuple[float, float]] = None) -> tuple[float, float]:
    """Least-squares slope of ``ln V`` against ``t``: returns ``(sigma0, r_squared)``.

    ``trace`` is a MetricsTrace or a ``(t, V)`` pair of arrays.
    """
    if isinstance(trace, MetricsTrace):
        t, V = trace.t, trace.column("V")
    else:
        t, V = (np.asarray(a, dtype=float) for a in trace)
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, V = t[sel], V[sel]
    if len(t) < 2:
        raise ValueError("decay fit needs at least two samples in the window")
    if np.any(V <= 0):
        raise ValueError("decay fit needs V > 0 throughout the window")
    y = np.log(V)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    # a flat log-series is a perfect (zero-slope) fit; rounding in the mean is not spread
    flat = ss_tot <= len(y) * (16 * np.finfo(float).eps * max(1.0, np.max(np.abs(y)))) ** 2
    r2 = 1.0 if flat else 1.0 - np.sum(resid ** 2) / ss_tot
    return float(-slope), float(r2)


def validity_bound(sp: Setpoint) -> float:
    """Squared interface offset below which the interface provably stays inside."""
    return min((sp.L - sp.l_star) ** 2, sp.l_star ** 2)


def validity_implication_holds(trace: MetricsTrace, sp: Setpoint) -> bool:
    """``X^2 < bound`` implies ``0 < l < L`` at every record."""
    bound = validity_bound(sp)
    return all(r.X ** 2 >= bound or 0.0 < r.l < sp.L for r in trace.records)
