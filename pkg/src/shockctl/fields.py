"""Density fields on a moving subdomain and their quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DensityField:
    """Samples of a density (or deviation) on ``[left, right]``.

    With ``centered=False`` the samples sit on the ``n_cells + 1`` nodes of a
    uniform lattice and the field is their piecewise-linear interpolant.
    With ``centered=True`` they are ``n_cells`` finite-volume cell averages:
    sampling interpolates linearly between centres (constant in the outer
    half cells) and integration treats each cell as constant, so the total
    equals the conserved mass exactly.
    """

    values: np.ndarray
    left: float
    right: float
    centered: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not self.left < self.right:
            raise ValueError(f"empty domain [{self.left}, {self.right}]")
        if self.n_cells < 2:
            raise ValueError(f"need at least 2 cells, got {self.n_cells}")

    @property
    def n_cells(self) -> int:
        return len(self.values) if self.centered else len(self.values) - 1

    @property
    def h(self) -> float:
        return (self.right - self.left) / self.n_cells

    @property
    def x(self) -> np.ndarray:
        if self.centered:
            return self.left + (np.arange(self.n_cells) + 0.5) * self.h
        return np.linspace(self.left, self.right, self.n_cells + 1)

    def with_values(self, values) -> DensityField:
        return DensityField(values, self.left, self.right, self.centered)

    def shifted(self, offset: float) -> DensityField:
        """Same grid, values minus ``offset`` (deviation from a setpoint)."""
        return self.with_values(self.values - offset)

    def sample(self, x):
        return np.interp(x, self.x, self.values)

    def gradient(self) -> np.ndarray:
        return np.gradient(self.values, self.x)

    def _locate(self, y):
        y = np.clip(np.asarray(y, dtype=float), self.left, self.right)
        k = np.floor((y - self.left) / self.h).astype(int)
        k = np.clip(k, 0, self.n_cells - 1)
        s = y - (self.left + k * self.h)
        return k, s

    def _partial_sums(self) -> np.ndarray:
        # values are treated as immutable once the field is built
        c = self.__dict__.get("_csum")
        if c is None:
            v, h = self.values, self.h
            if self.centered:
                c = np.concatenate(([0.0], np.cumsum(v) * h))
            else:
                c = np.concatenate(([0.0], np.cumsum(0.5 * h * (v[:-1] + v[1:]))))
            self.__dict__["_csum"] = c
        return c

    def cumulative(self, y):
        """Integral of the field from ``left`` to ``y`` (clipped to the domain)."""
        v = self.values
        h = self.h
        c = self._partial_sums()
        if np.ndim(y) == 0:
            yy = min(max(float(y), self.left), self.right)
            k = min(max(int((yy - self.left) // h), 0), self.n_cells - 1)
            s = yy - (self.left + k * h)
            if self.centered:
                return float(c[k] + s * v[k])
            return float(c[k] + s * v[k] + s * s / (2.0 * h) * (v[k + 1] - v[k]))
        k, s = self._locate(y)
        if self.centered:
            return c[k] + s * v[k]
        return c[k] + s * v[k] + s * s / (2.0 * h) * (v[k + 1] - v[k])

    def integral(self, a, b):
        """Integral over ``[a, b]``; bounds are clipped to the domain."""
        return self.cumulative(b) - self.cumulative(a)

    def total(self) -> float:
        return float(self.cumulative(self.right))

    def cumulative_weights(self, y) -> np.ndarray:
        """Matrix ``W`` with ``W @ values == cumulative(y)`` for each ``y``."""
        y = np.atleast_1d(y)
        k, s = self._locate(y)
        h = self.h
        m, n = len(y), len(self.values)
        j = np.arange(n)[None, :]
        kk = k[:, None]
        W = np.zeros((m, n))
        if self.centered:
            W[j < kk] = h
            W[np.arange(m), k] += s
        else:
            W[j <= kk] = h
            W[:, 0] -= 0.5 * h
            W[np.arange(m), k] -= 0.5 * h
            # k == 0 has no complete interval
            W[k == 0, :] = 0.0
            W[np.arange(m), k] += s - s * s / (2.0 * h)
            W[np.arange(m), k + 1] += s * s / (2.0 * h)
        return W
