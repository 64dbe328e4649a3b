"""Uniform time grids and path containers shared by the model and sde layers.

Kept in a private module so that model does not have to import the
integrator machinery (sde imports model for parameter types; this file
breaks the cycle).  Public names are re-exported by chainlab.sde.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil, isfinite

import numpy as np

__all__ = ["TimeGrid", "Path"]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [t_start, t_end] with step dt.

    If dt does not divide the requested span exactly, t_end is pushed up to
    the next multiple (never beyond one extra step), so the stored t_end is
    always t_start + n_steps*dt.
    """

    t_start: float
    t_end: float
    dt: float
    n_steps: int = field(init=False)

    def __post_init__(self):
        for name in ("t_start", "t_end", "dt"):
            if not isfinite(getattr(self, name)):
                raise ValueError(f"TimeGrid.{name} must be finite")
        if not self.dt > 0.0:
            raise ValueError(f"TimeGrid.dt must be > 0, got {self.dt}")
        if not self.t_start < self.t_end:
            raise ValueError(
                f"TimeGrid requires t_start < t_end, got [{self.t_start}, {self.t_end}]")
        span = self.t_end - self.t_start
        n = ceil(span / self.dt - 1e-9)
        object.__setattr__(self, "n_steps", int(n))
        object.__setattr__(self, "t_end", self.t_start + n * self.dt)

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Index of the grid point nearest t (t must lie on the grid span)."""
        if t < self.t_start - 0.5 * self.dt or t > self.t_end + 0.5 * self.dt:
            raise ValueError(f"time {t} outside grid [{self.t_start}, {self.t_end}]")
        return int(round((t - self.t_start) / self.dt))


@dataclass(frozen=True)
class Path:
    """A trajectory sampled on a TimeGrid; p is present for underdamped runs.

    Values must be finite: integrators clamp diverging paths and mark them
    with the truncated flag instead of storing NaN/inf.
    """

    grid: TimeGrid
    q: np.ndarray
    p: np.ndarray | None = None
    truncated: bool = False

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        object.__setattr__(self, "q", q)
        if q.shape != (self.grid.n_steps + 1,):
            raise ValueError(
                f"path length {q.shape} does not match grid ({self.grid.n_steps + 1},)")
        if not np.all(np.isfinite(q)):
            raise ValueError("non-finite values in path; integrators must clamp and flag")
        if self.p is not None:
            p = np.asarray(self.p, dtype=np.float64)
            object.__setattr__(self, "p", p)
            if p.shape != q.shape:
                raise ValueError("p and q lengths differ")
            if not np.all(np.isfinite(p)):
                raise ValueError("non-finite values in momentum")

    @property
    def times(self) -> np.ndarray:
        return self.grid.times
