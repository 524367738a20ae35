"""Timestamped boundary-input history with linear interpolation."""

from __future__ import annotations

import numpy as np


class HistoryUnderflowError(RuntimeError):
    """A query reached further back than the stored horizon."""


class InputHistory:
    """Append-only record of ``(t, value)`` pairs trimmed to a time horizon.

    Samples older than ``t_latest - horizon`` are dropped. Queries between
    samples interpolate linearly; queries past the newest sample hold the
    newest value (zero-order hold until the next control update).
    """

    def __init__(self, horizon: float, capacity: int = 1024):
        if not horizon > 0:
            raise ValueError(f"horizon must be positive, got {horizon}")
        self.horizon = float(horizon)
        self._t = np.empty(capacity)
        self._v = np.empty(capacity)
        self._start = 0
        self._end = 0

    def __len__(self):
        return self._end - self._start

    @property
    def times(self) -> np.ndarray:
        return self._t[self._start:self._end]

    @property
    def values(self) -> np.ndarray:
        return self._v[self._start:self._end]

    @property
    def oldest(self) -> float:
        return float(self._t[self._start])

    @property
    def latest(self) -> float:
        return float(self._t[self._end - 1])

    def append(self, t: float, value: float) -> None:
        """Add a sample; re-recording the newest timestamp overwrites it."""
        if len(self) and t <= self.latest:
            if t == self.latest:
                self._v[self._end - 1] = value
                return
            raise ValueError(f"timestamps must increase: {t} after {self.latest}")
        if self._end == len(self._t):
            self._compact()
        self._t[self._end] = t
        self._v[self._end] = value
        self._end += 1
        cutoff = t - self.horizon
        # keep one sample at or before the cutoff so queries at the edge interpolate
        idx = np.searchsorted(self._t[self._start:self._end], cutoff, side="right") - 1
        if idx > 0:
            self._start += int(idx)

    def extend(self, times, values) -> None:
        for t, v in zip(times, values):
            self.append(float(t), float(v))

    def _compact(self):
        n = len(self)
        cap = max(2 * n, 1024)
        t = np.empty(cap)
        v = np.empty(cap)
        t[:n] = self.times
        v[:n] = self.values
        self._t, self._v = t, v
        self._start, self._end = 0, n

    def __call__(self, t):
        """Interpolated value(s) at time(s) ``t``."""
        if len(self) == 0:
            raise HistoryUnderflowError("history is empty")
        tq = np.asarray(t, dtype=float)
        if np.any(tq < self.oldest - 1e-9):
            raise HistoryUnderflowError(
                f"requested t={float(np.min(tq)):.6g} s older than stored horizon "
                f"(oldest sample {self.oldest:.6g} s)"
            )
        out = np.interp(tq, self.times, self.values)
        return float(out) if out.ndim == 0 else out

    def integral(self, t0: float, t1: float) -> float:
        """Exact integral of the interpolant over ``[t0, t1]``."""
        if t1 < t0:
            return -self.integral(t1, t0)
        ts, vs = self.times, self.values
        inner = (ts > t0) & (ts < t1)
        knots = np.concatenate(([t0], ts[inner], [t1]))
        vals = np.asarray(self(knots))
        return float(np.sum(0.5 * np.diff(knots) * (vals[:-1] + vals[1:])))
