"""Greenshields fundamental diagram, setpoints and linearization constants.

All quantities are SI: metres, seconds, vehicles per metre.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VEH_PER_KM = 1e-3  # veh/km -> veh/m
KMPH = 1.0 / 3.6  # km/h -> m/s


class DensityDomainError(ValueError):
    """A density fell outside [0, rho_m]."""


class SetpointError(ValueError):
    """A setpoint violates one of the model validity inequalities."""


@dataclass(frozen=True)
class FundamentalDiagram:
    v_m: float  # m/s
    rho_m: float  # veh/m

    def __post_init__(self):
        if not (self.v_m > 0 and self.rho_m > 0):
            raise ValueError(f"v_m and rho_m must be positive, got {self.v_m}, {self.rho_m}")

    @property
    def jump_density(self) -> float:
        return self.rho_m / 2.0

    @property
    def b(self) -> float:
        return self.v_m / self.rho_m

    def _check(self, rho):
        arr = np.asarray(rho, dtype=float)
        if np.any(arr < 0.0) or np.any(arr > self.rho_m):
            raise DensityDomainError(
                f"density outside [0, {self.rho_m}] veh/m: "
                f"min={arr.min():.6g}, max={arr.max():.6g}"
            )
        return arr

    def velocity(self, rho):
        return equilibrium_velocity(rho, self)

    def flux(self, rho):
        return flux(rho, self)

    def speed(self, rho):
        return characteristic_speed(rho, self)


@dataclass(frozen=True)
class Setpoint:
    rho_f_star: float
    rho_c_star: float
    l_star: float
    L: float

    @property
    def free_star(self) -> float:
        return self.rho_f_star

    @property
    def congested_star(self) -> float:
        return self.rho_c_star


@dataclass(frozen=True)
class DerivedParams:
    u: float  # transport speed of the linearized fields, m/s
    b: float  # interface sensitivity v_m / rho_m, m^2/(veh s)


def _scalar_or_array(arr):
    return float(arr) if arr.ndim == 0 else arr


def equilibrium_velocity(rho, fd: FundamentalDiagram):
    """Greenshields speed ``v_m (1 - rho/rho_m)``."""
    r = fd._check(rho)
    return _scalar_or_array(fd.v_m * (1.0 - r / fd.rho_m))


def flux(rho, fd: FundamentalDiagram):
    r = fd._check(rho)
    return _scalar_or_array(fd.v_m * r * (1.0 - r / fd.rho_m))


def characteristic_speed(rho, fd: FundamentalDiagram):
    """Derivative of the flux; positive in the free regime, negative when congested."""
    r = fd._check(rho)
    return _scalar_or_array(fd.v_m * (1.0 - 2.0 * r / fd.rho_m))


def matched_setpoint(rho_f_star: float, l_star: float, L: float,
                     fd: FundamentalDiagram) -> Setpoint:
    """Build the flux-matched setpoint with ``rho_c* = rho_m - rho_f*``.

    Raises SetpointError naming the violated inequality.
    """
    if not L > 0:
        raise SetpointError(f"segment length must be positive, got L={L}")
    if not 0.0 < rho_f_star:
        raise SetpointError(f"0 < rho_f_star violated: rho_f_star={rho_f_star}")
    if not rho_f_star < fd.jump_density:
        raise SetpointError(
            f"rho_f_star < rho_jump violated: rho_f_star={rho_f_star}, "
            f"rho_jump={fd.jump_density}"
        )
    if not 0.0 < l_star < L:
        raise SetpointError(f"0 < l_star < L violated: l_star={l_star}, L={L}")
    return Setpoint(rho_f_star=rho_f_star, rho_c_star=fd.rho_m - rho_f_star,
                    l_star=l_star, L=L)


def validate_setpoint(sp: Setpoint, fd: FundamentalDiagram) -> None:
    if not 0.0 < sp.rho_f_star < fd.jump_density < sp.rho_c_star < fd.rho_m:
        raise SetpointError(
            "0 < rho_f* < rho_jump < rho_c* < rho_m violated: "
            f"({sp.rho_f_star}, {fd.jump_density}, {sp.rho_c_star}, {fd.rho_m})"
        )
    if not 0.0 < sp.l_star < sp.L:
        raise SetpointError(f"0 < l_star < L violated: l_star={sp.l_star}, L={sp.L}")
    if not np.isclose(sp.rho_f_star + sp.rho_c_star, fd.rho_m, rtol=0.0, atol=1e-15):
        raise SetpointError(
            f"rho_f* + rho_c* == rho_m violated: {sp.rho_f_star} + {sp.rho_c_star} != {fd.rho_m}"
        )


def derived_params(sp: Setpoint, fd: FundamentalDiagram) -> DerivedParams:
    validate_setpoint(sp, fd)
    u = fd.v_m * (1.0 - 2.0 * sp.rho_f_star / fd.rho_m)
    return DerivedParams(u=u, b=fd.b)
