"""Report figures rendered to files from the same series written to CSV."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .plant import PlantState  # noqa: E402
from .traffic_core import VEH_PER_KM  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

STYLE = {
    "font.family": "serif",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def size(scale: float = 1.0, width_in: float = 5.5) -> tuple[float, float]:
    w = width_in * scale
    return w, w * GOLDEN


def new(nrows: int = 1, ncols: int = 1, scale: float = 1.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=size(scale))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def profile_series(state: PlantState) -> tuple[np.ndarray, np.ndarray]:
    """``(x_m, rho_veh_per_km)`` along the whole segment, free side first."""
    x = np.concatenate((state.free.x, state.congested.x))
    rho = np.concatenate((state.free.values, state.congested.values)) / VEH_PER_KM
    return x, rho


def density_profiles(initial: PlantState, final: PlantState, path,
                     rho_jump: Optional[float] = None):
    with plt.rc_context(STYLE):
        fig, ax = new()
        for state, label, style in ((initial, "initial", "--"), (final, "final", "-")):
            x, rho = profile_series(state)
            ax.plot(x, rho, style, label=f"{label} (t = {state.t:.0f} s)")
        if rho_jump is not None:
            ax.axhline(rho_jump / VEH_PER_KM, color="0.6", lw=0.8, ls=":")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("density (veh/km)")
        ax.legend()
    return save(fig, path)


def interface_positions(t_closed, l_closed, t_open, l_open, l_star: float, L: float, path):
    with plt.rc_context(STYLE):
        fig, ax = new()
        ax.plot(t_closed, l_closed, label="closed loop")
        ax.plot(t_open, l_open, "--", label="open loop")
        ax.axhline(l_star, color="0.6", lw=0.8, ls=":")
        ax.set_ylim(0.0, L)
        ax.set_xlabel("t (s)")
        ax.set_ylabel("interface l(t) (m)")
        ax.legend()
    return save(fig, path)


def boundary_inputs(t, u_in, u_out, path):
    with plt.rc_context(STYLE):
        fig, ax = new()
        ax.plot(t, np.asarray(u_in) / VEH_PER_KM, label="inlet")
        ax.plot(t, np.asarray(u_out) / VEH_PER_KM, "--", label="outlet")
        ax.axhline(0.0, color="0.6", lw=0.8)
        ax.set_xlabel("t (s)")
        ax.set_ylabel("input deviation (veh/km)")
        ax.legend()
    return save(fig, path)
