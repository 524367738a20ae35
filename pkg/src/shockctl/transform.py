"""Predictor-based backstepping transformation and target-system checks.

The forward map sends plant deviations ``(rho_f~, rho_c~, X)`` to target
variables ``(w_f, w_c, X)``. On a discrete grid it is an affine map of the
samples; :func:`inverse_transform` inverts that map exactly, so round trips
are identities to rounding rather than to quadrature error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .control import ControlGains, ControlInput
from .fields import DensityField
from .plant import PlantState
from .traffic_core import DerivedParams, Setpoint


@dataclass
class TargetState:
    w_f: DensityField  # on [0, l]
    w_c: DensityField  # on [l, L]
    x_dev: float
    t: float

    @property
    def l(self) -> float:
        return self.w_f.right

    @property
    def L(self) -> float:
        return self.w_c.right


def deviations(state: PlantState, sp: Setpoint) -> tuple[DensityField, DensityField, float]:
    return (state.free.shifted(sp.rho_f_star), state.congested.shifted(sp.rho_c_star),
            state.l - sp.l_star)


def forward_fields(df: DensityField, dc: DensityField, X: float, gains: ControlGains,
                   params: DerivedParams) -> tuple[np.ndarray, np.ndarray]:
    l, L = df.right, dc.right
    c = params.b / params.u
    xf, xc = df.x, dc.x
    own_f = df.total() - df.cumulative(xf)  # int_x^l
    cross_c = dc.cumulative(np.minimum(L, 2.0 * l - xf))  # int_l^{min(L, 2l-x)}
    w_f = df.values - gains.k_f * (X - c * own_f - c * cross_c)
    own_c = dc.cumulative(xc)  # int_l^x
    cross_f = df.total() - df.cumulative(np.maximum(0.0, 2.0 * l - xc))  # int_{max(0,2l-x)}^l
    w_c = dc.values - gains.k_c * (X - c * own_c - c * cross_f)
    return w_f, w_c


def forward_transform(state: PlantState, sp: Setpoint, gains: ControlGains,
                      params: DerivedParams) -> TargetState:
    df, dc, X = deviations(state, sp)
    w_f, w_c = forward_fields(df, dc, X, gains, params)
    return TargetState(df.with_values(w_f), dc.with_values(w_c), X, state.t)


def forward_matrix(df: DensityField, dc: DensityField, gains: ControlGains,
                   params: DerivedParams) -> tuple[np.ndarray, np.ndarray]:
    """``(A, k)`` with ``[w_f; w_c] = A [rho_f~; rho_c~] - X k`` on these grids."""
    l, L = df.right, dc.right
    c = params.b / params.u
    nf, nc = len(df.values), len(dc.values)
    xf, xc = df.x, dc.x
    Wf_l = df.cumulative_weights([l])
    A = np.eye(nf + nc)
    A[:nf, :nf] += gains.k_f * c * (Wf_l - df.cumulative_weights(xf))
    A[:nf, nf:] += gains.k_f * c * dc.cumulative_weights(np.minimum(L, 2.0 * l - xf))
    A[nf:, nf:] += gains.k_c * c * dc.cumulative_weights(xc)
    A[nf:, :nf] += gains.k_c * c * (Wf_l - df.cumulative_weights(np.maximum(0.0, 2.0 * l - xc)))
    k = np.concatenate((np.full(nf, gains.k_f), np.full(nc, gains.k_c)))
    return A, k


def inverse_transform(target: TargetState, sp: Setpoint, gains: ControlGains,
                      params: DerivedParams) -> tuple[DensityField, DensityField, float]:
    """Recover ``(rho_f~, rho_c~, X)`` from target variables.

    Solves the discrete forward map, a Volterra-type system that is
    invertible whenever the grid resolves the integrals.
    """
    A, k = forward_matrix(target.w_f, target.w_c, gains, params)
    rhs = np.concatenate((target.w_f.values, target.w_c.values)) + target.x_dev * k
    rho = np.linalg.solve(A, rhs)
    nf = len(target.w_f.values)
    return (target.w_f.with_values(rho[:nf]), target.w_c.with_values(rho[nf:]), target.x_dev)


def g_term(target: TargetState, gains: ControlGains) -> float:
    l = target.l
    return float((gains.k_f - gains.k_c) * target.x_dev
                 + target.w_f.sample(l) - target.w_c.sample(l))


def epsilon_terms(state: PlantState, x, sp: Setpoint):
    """Mirror-image deviations ``(eps_f, eps_c)`` at ``x`` with zero extension.

    ``eps_c(x) = rho_c~(2l - x)`` while the mirror point lies on the congested
    side ``[l, L]`` and ``eps_f(x) = rho_f~(2l - x)`` while it lies on the free
    side ``[0, l]``; both vanish otherwise (traffic beyond the segment sits at
    its setpoint).
    """
    df, dc, _ = deviations(state, sp)
    l, L = state.l, state.L
    y = 2.0 * l - np.asarray(x, dtype=float)
    eps_c = np.where((y >= l) & (y <= L), dc.sample(np.clip(y, l, L)), 0.0)
    eps_f = np.where((y >= 0.0) & (y <= l), df.sample(np.clip(y, 0.0, l)), 0.0)
    if eps_c.ndim == 0:
        return float(eps_f), float(eps_c)
    return eps_f, eps_c


@dataclass
class ResidualReport:
    boundary_free: float  # max_t |w_f(0, t)|
    boundary_congested: float  # max_t |w_c(L, t)|
    pde_free: float
    pde_congested: float
    ode: float
    # root-mean-square over the nodes and steps entering the max norms
    rms_pde_free: float = 0.0
    rms_pde_congested: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def target_residual(trajectory: Sequence[tuple[PlantState, ControlInput]], gains: ControlGains,
                    params: DerivedParams, sp: Setpoint) -> ResidualReport:
    """Max-norm residuals of the target system along a uniformly sampled run.

    Time derivatives are centred differences taken along the moving grid
    nodes and corrected by the node velocity; spatial derivatives are
    centred in the interior.

    Where the mirror bound is clipped at a segment end (``x < 2l - L`` on the
    free side, ``x > 2l`` on the congested side) differentiating the clipped
    integral leaves a boundary term ``K b rho~(end)``, which is included in
    the source. ``w`` has a slope kink at the clipping point, so nodes whose
    stencil straddles it are left out of the PDE norms.
    """
    if len(trajectory) < 3:
        raise ValueError(f"need at least 3 trajectory samples, got {len(trajectory)}")
    states = [s for s, _ in trajectory]
    if states[0].free.centered:
        raise ValueError("target residuals need node-based (linearized) trajectories")
    ts = np.array([s.t for s in states])
    dts = np.diff(ts)
    dt = dts[0]
    if not np.allclose(dts, dt, rtol=1e-6, atol=1e-12):
        raise ValueError("trajectory must be uniformly sampled")
    targets = [forward_transform(s, sp, gains, params) for s in states]
    ls = np.array([s.l for s in states])
    X = ls - sp.l_star
    u, b, a = params.u, params.b, gains.a

    bf = max(abs(tg.w_f.values[0]) for tg in targets)
    bc = max(abs(tg.w_c.values[-1]) for tg in targets)

    ldot = np.gradient(ls, dt)
    ode = max(abs(ldot[k] + a * X[k] + b * (targets[k].w_f.values[-1] + targets[k].w_c.values[0]))
              for k in range(1, len(states) - 1))

    pde_f = pde_c = 0.0
    sq_f = sq_c = 0.0
    count_f = count_c = 0
    for k in range(1, len(states) - 1):
        tg = targets[k]
        n = tg.w_f.n_cells
        frac = np.arange(n + 1) / n
        g = g_term(tg, gains)
        eps_f, _ = epsilon_terms(states[k], tg.w_c.x, sp)
        _, eps_c = epsilon_terms(states[k], tg.w_f.x, sp)

        l, L = tg.l, tg.L
        df, dc, _ = deviations(states[k], sp)

        xf = tg.w_f.x
        along = (targets[k + 1].w_f.values - targets[k - 1].w_f.values) / (2.0 * dt)
        wx = tg.w_f.gradient()
        dwdt = along - frac * ldot[k] * wx
        clipped = xf < 2.0 * l - L
        src = gains.k_f * b / u * ldot[k] * (g + 2.0 * eps_c) + gains.k_f * b * dc.values[-1] * clipped
        res = (dwdt + u * wx - src)[1:-1]
        res = res[np.abs(xf[1:-1] - (2.0 * l - L)) > 1.5 * tg.w_f.h]
        pde_f = max(pde_f, float(np.max(np.abs(res), initial=0.0)))
        sq_f += float(np.sum(res ** 2))
        count_f += len(res)

        xc = tg.w_c.x
        along = (targets[k + 1].w_c.values - targets[k - 1].w_c.values) / (2.0 * dt)
        wx = tg.w_c.gradient()
        dwdt = along - (1.0 - frac) * ldot[k] * wx
        clipped = xc > 2.0 * l
        src = gains.k_c * b / u * ldot[k] * (g - 2.0 * eps_f) + gains.k_c * b * df.values[0] * clipped
        res = (dwdt - u * wx - src)[1:-1]
        res = res[np.abs(xc[1:-1] - 2.0 * l) > 1.5 * tg.w_c.h]
        pde_c = max(pde_c, float(np.max(np.abs(res), initial=0.0)))
        sq_c += float(np.sum(res ** 2))
        count_c += len(res)

    return ResidualReport(float(bf), float(bc), pde_f, pde_c, float(ode),
                          float(np.sqrt(sq_f / max(count_f, 1))), float(np.sqrt(sq_c / max(count_c, 1))))
