"""Stochastic integrators: overdamped and underdamped normal form, the
auxiliary (Q, P) pair, the three-particle chain, and coupled runs that share
one Brownian path.

Noise is always additive, so Euler-Maruyama already has strong order 1 for
the overdamped equation; the underdamped schemes use an exact
Ornstein-Uhlenbeck substep with the force frozen per step, which keeps them
stable at dt far above the momentum relaxation time eps^beta.

Passing ``noise=None`` to any integrator runs the zero-noise dynamics (the
sigma = 0 reduction used by the consistency tests).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from ._grid import Path, TimeGrid
from .model import NormalFormParams, PotentialSpec

__all__ = [
    "CoupledSpec",
    "GridMismatchError",
    "NoiseStream",
    "Path",
    "StepSizeError",
    "TimeGrid",
    "dt_max",
    "dump_paths",
    "integrate_chain",
    "integrate_coupled",
    "integrate_ou_pair",
    "integrate_overdamped",
    "integrate_underdamped",
    "load_paths",
    "sandwich_bias",
]


class StepSizeError(ValueError):
    """Requested dt exceeds the stability budget dt_max = eps * h_rel."""


class GridMismatchError(ValueError):
    """Noise stream or coupled descriptor bound to a different grid."""


def dt_max(params: NormalFormParams, h_rel: float = 0.02) -> float:
    """Largest allowed step.  The explicit drift step is stable while
    dt*max|t - 3q^2|/eps < 2; with |q| clamped at 10 and h_rel = 0.02 this
    holds for any |t| up to ~100."""
    return params.epsilon * h_rel


# ---------------------------------------------------------------------------
# reproducible noise
# ---------------------------------------------------------------------------

_CHANNEL_BASE = 0       # level-0 Brownian increments
_CHANNEL_AUX = 100      # extra normals for the exact OU substep
_CHANNEL_IC = 101       # initial-condition draws
_MAX_LEVELS = 21


@dataclass(frozen=True)
class NoiseStream:
    """Per-path Brownian increments, reproducible and refinement-consistent.

    Each (path_index, channel) pair owns an independent PCG64DXSM generator
    spawned from the master seed, so paths can be generated in any order or
    in parallel.  ``refined()`` halves dt; the finer increments are produced
    by Brownian-bridge midpoints conditioned on the coarse ones, so summing
    adjacent fine increments reproduces the coarse increment to rounding.
    """

    seed: int
    grid: TimeGrid
    path_index: int = 0
    levels: int = 0

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        if self.path_index < 0:
            raise ValueError("path_index must be nonnegative")
        if not 0 <= self.levels <= _MAX_LEVELS:
            raise ValueError(f"bridge depth must be in [0, {_MAX_LEVELS}]")
        if self.grid.n_steps % (1 << self.levels) != 0:
            raise ValueError("grid does not divide into the base grid")

    def _rng(self, channel: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed,
                                    spawn_key=(self.path_index, channel))
        return np.random.Generator(np.random.PCG64DXSM(ss))

    def for_path(self, path_index: int) -> "NoiseStream":
        return replace(self, path_index=path_index)

    def refined(self) -> "NoiseStream":
        """Stream on the grid with half the step, bridge-consistent."""
        if self.levels + 1 > _MAX_LEVELS:
            raise ValueError(f"refinement beyond {_MAX_LEVELS} levels")
        g = self.grid
        fine = TimeGrid(t_start=g.t_start, t_end=g.t_end, dt=g.dt / 2.0)
        return NoiseStream(seed=self.seed, grid=fine,
                           path_index=self.path_index, levels=self.levels + 1)

    def increments(self) -> np.ndarray:
        """Gaussian increments with variance grid.dt, one per step."""
        base_dt = self.grid.dt * (1 << self.levels)
        n_base = self.grid.n_steps >> self.levels
        arr = self._rng(_CHANNEL_BASE).standard_normal(n_base) * math.sqrt(base_dt)
        fine_dt = base_dt
        for level in range(1, self.levels + 1):
            fine_dt /= 2.0
            z = self._rng(level).standard_normal(arr.size)
            first = 0.5 * arr + math.sqrt(0.5 * fine_dt) * z
            out = np.empty(arr.size * 2)
            out[0::2] = first
            out[1::2] = arr - first
            arr = out
        return arr

    def aux_normals(self, n: int) -> np.ndarray:
        """Unit normals for the exact OU substep (not bridge-refined)."""
        return self._rng(_CHANNEL_AUX).standard_normal(n)

    def initial_uniform(self, lo: float, hi: float) -> float:
        return float(self._rng(_CHANNEL_IC).uniform(lo, hi))


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _check_step(params, grid, h_rel):
    cap = dt_max(params, h_rel)
    if grid.dt > cap * (1.0 + 1e-12):
        raise StepSizeError(
            f"dt = {grid.dt:g} exceeds dt_max = eps*h_rel = {cap:g}; "
            f"refine the grid or raise h_rel explicitly")


def _noise_arrays(grid, noise, need_aux):
    if noise is None:
        dw = np.zeros(grid.n_steps)
        z2 = np.zeros(grid.n_steps) if need_aux else None
        return dw, z2, 0.0
    if not isinstance(noise, NoiseStream):
        raise TypeError("noise must be a NoiseStream or None")
    if noise.grid != grid:
        raise GridMismatchError("noise stream was built for a different grid")
    dw = noise.increments()
    z2 = noise.aux_normals(grid.n_steps) if need_aux else None
    return dw, z2, 1.0


def _ou_coefficients(params, dt, noise_on):
    """(decay, cov_h, b_res, epsbeta, c) of the exact momentum substep.

    eta_p = cov_h*dW + b_res*Z reproduces the joint law of the OU increment
    with the Brownian increment: Var(eta) = theta c^2 (1-E^2)/2 and
    Cov(dW, eta) = c (1-E), with theta = eps^-beta.
    """
    eps, beta = params.epsilon, params.beta
    c = params.sigma / math.sqrt(eps) * noise_on
    theta = eps ** (-beta)
    x = theta * dt
    decay = math.exp(-x)
    one_m = -math.expm1(-x)
    var_eta = 0.5 * theta * c * c * (-math.expm1(-2.0 * x))
    cov_h = c * one_m / dt
    b_res = math.sqrt(max(var_eta - (c * one_m) ** 2 / dt, 0.0))
    return decay, cov_h, b_res, eps ** beta, c


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------

def integrate_overdamped(params: NormalFormParams, x0: float, grid: TimeGrid,
                         noise: NoiseStream | None, bias_scale: float = 1.0,
                         h_rel: float = 0.02, start_index: int = 0) -> Path:
    """Euler-Maruyama path of dq = (tq - q^3 + eps*bias_scale)/eps dt
    + (sigma/sqrt(eps)) dW.  bias_scale = 0 gives the unbiased comparison
    process; the sandwich processes use 1 +- r."""
    if not math.isfinite(x0):
        raise ValueError("x0 must be finite")
    _check_step(params, grid, h_rel)
    dw, _, on = _noise_arrays(grid, noise, need_aux=False)
    c = params.sigma / math.sqrt(params.epsilon) * on
    q = np.empty(grid.n_steps + 1)
    truncated = _kernels.em_overdamped(
        float(x0), grid.t_start, grid.dt, params.epsilon,
        bias_scale * params.epsilon, c, dw, start_index, q)
    return Path(grid=grid, q=q, truncated=bool(truncated))


def integrate_underdamped(params: NormalFormParams, x0: float, v0: float,
                          grid: TimeGrid, noise: NoiseStream | None,
                          bias_scale: float = 1.0, h_rel: float = 0.02,
                          start_index: int = 0) -> Path:
    """Splitting scheme for dq = p dt,
    eps^beta dp = -p dt + (tq - q^3 + eps*bias_scale)/eps dt + (sigma/sqrt(eps)) dW,
    with the momentum Ornstein-Uhlenbeck substep taken exactly."""
    if params.beta <= 2.0:
        raise ValueError(f"underdamped integration requires beta > 2, got {params.beta}")
    if not (math.isfinite(x0) and math.isfinite(v0)):
        raise ValueError("initial conditions must be finite")
    _check_step(params, grid, h_rel)
    dw, z2, on = _noise_arrays(grid, noise, need_aux=True)
    decay, cov_h, b_res, epsbeta, c = _ou_coefficients(params, grid.dt, on)
    q = np.empty(grid.n_steps + 1)
    p = np.empty(grid.n_steps + 1)
    truncated = _kernels.underdamped_nf(
        float(x0), float(v0), grid.t_start, grid.dt, params.epsilon,
        bias_scale * params.epsilon, c, decay, cov_h, b_res, epsbeta,
        dw, z2, start_index, q, p)
    return Path(grid=grid, q=q, p=p, truncated=bool(truncated))


def integrate_ou_pair(params: NormalFormParams, grid: TimeGrid,
                      noise: NoiseStream | None) -> Path:
    """The auxiliary linear pair from zero initial conditions:
    eps^beta dP = -P dt + (sigma/sqrt(eps)) dW and dQ = P dt, returned with
    Q as q and P as p.  Satisfies Q = (sigma/sqrt(eps)) W - eps^beta P
    identically on the grid."""
    if params.beta <= 2.0:
        raise ValueError(f"the (Q, P) pair requires beta > 2, got {params.beta}")
    dw, z2, on = _noise_arrays(grid, noise, need_aux=True)
    decay, cov_h, b_res, epsbeta, c = _ou_coefficients(params, grid.dt, on)
    q = np.empty(grid.n_steps + 1)
    p = np.empty(grid.n_steps + 1)
    _kernels.ou_pair(decay, cov_h, b_res, c, epsbeta, dw, z2, q, p)
    return Path(grid=grid, q=q, p=p)


def integrate_chain(params: NormalFormParams, potential: PotentialSpec,
                    x0: float, v0: float, grid: TimeGrid,
                    noise: NoiseStream | None, h_rel: float = 0.02) -> Path:
    """Middle particle of the pulled chain, in original coordinates.

    With v = p/eps the chain is the underdamped scheme with force
    -U'(q) + U'(2a(1+t) - q) in place of the cubic; same exact momentum
    substep, same noise scaling."""
    if params.beta <= 2.0:
        raise ValueError(f"chain integration requires beta > 2, got {params.beta}")
    _check_step(params, grid, h_rel)
    dw, z2, on = _noise_arrays(grid, noise, need_aux=True)
    decay, cov_h, b_res, epsbeta, c = _ou_coefficients(params, grid.dt, on)
    breaks, coefs, ca = potential.du_ppoly_data()
    q = np.empty(grid.n_steps + 1)
    p = np.empty(grid.n_steps + 1)
    truncated = _kernels.underdamped_chain(
        float(x0), float(v0), grid.t_start, grid.dt, params.epsilon, c,
        decay, cov_h, b_res, epsbeta, potential.a,
        np.ascontiguousarray(breaks), np.ascontiguousarray(coefs), ca,
        potential.b, dw, z2, q, p)
    return Path(grid=grid, q=q, p=p, truncated=bool(truncated))


# ---------------------------------------------------------------------------
# coupled runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoupledSpec:
    """One process in a coupled run sharing the Brownian path.

    kind: "overdamped", "underdamped", or "ou_pair".  bias_scale multiplies
    the +eps tilt (0 for the unbiased comparison process, 1 -+ r for the
    sandwich).  start_index freezes the process at its initial condition
    until that grid step; the noise it then consumes stays aligned with the
    other processes because all of them index one shared increment array.
    """

    kind: str
    x0: float = 0.0
    v0: float = 0.0
    bias_scale: float = 1.0
    start_index: int = 0

    def __post_init__(self):
        if self.kind not in ("overdamped", "underdamped", "ou_pair"):
            raise ValueError(f"unknown coupled process kind {self.kind!r}")
        if self.start_index < 0:
            raise ValueError("start_index must be nonnegative")
        if self.kind == "ou_pair" and self.start_index != 0:
            raise ValueError("the (Q, P) pair must start with the grid")


def integrate_coupled(params: NormalFormParams, specs: list[CoupledSpec],
                      grid: TimeGrid, noise: NoiseStream | None,
                      h_rel: float = 0.02) -> list[Path]:
    """Run every descriptor against the same increment arrays.

    Each process depends only on its own state recursion and the shared
    noise, so lockstep coupling is equivalent to running them in sequence
    over identical arrays.
    """
    if not specs:
        return []
    for s in specs:
        if not isinstance(s, CoupledSpec):
            raise TypeError("specs must be CoupledSpec instances")
        if s.start_index > grid.n_steps:
            raise GridMismatchError("start_index beyond the grid")
    _check_step(params, grid, h_rel)
    need_aux = any(s.kind in ("underdamped", "ou_pair") for s in specs)
    if any(s.kind in ("underdamped", "ou_pair") for s in specs) and params.beta <= 2.0:
        raise ValueError("underdamped members require beta > 2")
    dw, z2, on = _noise_arrays(grid, noise, need_aux)
    c = params.sigma / math.sqrt(params.epsilon) * on
    out: list[Path] = []
    for s in specs:
        if s.kind == "overdamped":
            q = np.empty(grid.n_steps + 1)
            tr = _kernels.em_overdamped(
                s.x0, grid.t_start, grid.dt, params.epsilon,
                s.bias_scale * params.epsilon, c, dw, s.start_index, q)
            out.append(Path(grid=grid, q=q, truncated=bool(tr)))
        elif s.kind == "underdamped":
            decay, cov_h, b_res, epsbeta, _ = _ou_coefficients(params, grid.dt, on)
            q = np.empty(grid.n_steps + 1)
            p = np.empty(grid.n_steps + 1)
            tr = _kernels.underdamped_nf(
                s.x0, s.v0, grid.t_start, grid.dt, params.epsilon,
                s.bias_scale * params.epsilon, c, decay, cov_h, b_res,
                epsbeta, dw, z2, s.start_index, q, p)
            out.append(Path(grid=grid, q=q, p=p, truncated=bool(tr)))
        else:
            decay, cov_h, b_res, epsbeta, _ = _ou_coefficients(params, grid.dt, on)
            q = np.empty(grid.n_steps + 1)
            p = np.empty(grid.n_steps + 1)
            _kernels.ou_pair(decay, cov_h, b_res, c, epsbeta, dw, z2, q, p)
            out.append(Path(grid=grid, q=q, p=p))
    return out


def sandwich_bias(params: NormalFormParams, big_c: float = 1.0) -> float:
    """r = C * max(eps^(beta-2-delta), sigma*eps^(-3/2+beta/2-2*delta)),
    the drift tilt of the sandwich processes."""
    if params.delta is None:
        raise ValueError("sandwich bias needs params.delta")
    eps, beta, delta = params.epsilon, params.beta, params.delta
    return big_c * max(eps ** (beta - 2.0 - delta),
                       params.sigma * eps ** (-1.5 + beta / 2.0 - 2.0 * delta))


# ---------------------------------------------------------------------------
# binary path dump
# ---------------------------------------------------------------------------

_MAGIC = b"CLPD"
_VERSION = 1


def dump_paths(paths, file) -> None:
    """Write paths to an open binary file or filesystem path.

    Layout (all little-endian): magic "CLPD", u32 version, u32 path count;
    per path a header (f64 t_start, f64 dt, u64 n_steps, u32 field count,
    u32 flags) followed by row-major (t, q[, p]) float64 records.
    """
    if isinstance(paths, Path):
        paths = [paths]
    own = not hasattr(file, "write")
    fh = open(file, "wb") if own else file
    try:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(paths)))
        for path in paths:
            g = path.grid
            fields = 2 if path.p is None else 3
            flags = 1 if path.truncated else 0
            fh.write(struct.pack("<ddQII", g.t_start, g.dt, g.n_steps,
                                 fields, flags))
            cols = [g.times, path.q] if fields == 2 else [g.times, path.q, path.p]
            fh.write(np.column_stack(cols).astype("<f8").tobytes())
    finally:
        if own:
            fh.close()


def load_paths(file) -> list[Path]:
    """Inverse of dump_paths; round-trips grids and flags exactly."""
    own = not hasattr(file, "read")
    fh = open(file, "rb") if own else file
    try:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a path dump (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported dump version {version}")
        out = []
        for _ in range(count):
            t_start, dt, n_steps, fields, flags = struct.unpack(
                "<ddQII", fh.read(32))
            rows = np.frombuffer(
                fh.read(8 * fields * (n_steps + 1)), dtype="<f8"
            ).reshape(n_steps + 1, fields)
            grid = TimeGrid(t_start=t_start, t_end=t_start + n_steps * dt, dt=dt)
            out.append(Path(grid=grid, q=rows[:, 1].copy(),
                            p=rows[:, 2].copy() if fields == 3 else None,
                            truncated=bool(flags & 1)))
        return out
    finally:
        if own:
            fh.close()
