"""The linear model: closed-form limit statistics and direct simulation.

The cubic is dropped, so the pair (q, p) is a Gaussian process and each time
step has an exact transition law.  The step matrices freeze the time-ramp
coefficient at the step midpoint, which leaves a second-order-in-dt defect
against the true time-ordered flow; everything else (stiff friction, the
noise covariance, the drift tilt) is integrated exactly, so the scheme is
stable at any dt.

The noise level is always derived from alpha: sigma_eff = eps^(alpha + 1/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .airy import j_integral, log_bi
from .analysis import EnsembleConfig, McSummary
from ._grid import Path, TimeGrid
from .model import NormalFormParams

__all__ = [
    "GaussianLimitStats",
    "default_grid",
    "escape_outcomes",
    "limit_stats",
    "linear_path",
    "moment_evolution",
    "renormalize_value",
    "renormalized_tail",
    "simulate_linear",
    "tail_ensemble",
]


def _phi(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# closed-form limit statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianLimitStats:
    """Limit law of the renormalized tail: mean m, variance v, and the
    probability p_plus = Phi(m/sqrt(v)) that the limit is positive."""

    m: float
    v: float
    ratio: float
    p_plus: float


def limit_stats(epsilon: float, alpha: float, beta: float) -> GaussianLimitStats:
    """Mean and variance of the renormalized limit, by quadrature.

    m = eps^{(1+beta)/3} * exp(-eps^{1-2beta}/12)
    v = eps^{2 alpha + (1+beta)/3} * exp(-eps^{1-2beta}/4) * J(p),
    with J the squared-Airy Laplace integral at p = eps^{(1-2beta)/3}/2.
    Up to quadrature error the ratio m/sqrt(v) equals
    (4 pi)^{1/4} * eps^{1/4 - alpha}.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    if not alpha > -0.5:
        raise ValueError(f"alpha must exceed -1/2, got {alpha}")
    x = epsilon ** (1.0 - 2.0 * beta)
    p = epsilon ** ((1.0 - 2.0 * beta) / 3.0) / 2.0
    m = epsilon ** ((1.0 + beta) / 3.0) * math.exp(-x / 12.0)
    v = epsilon ** (2.0 * alpha + (1.0 + beta) / 3.0) * math.exp(-x / 4.0) \
        * j_integral(p)
    if not (m > 0.0 and v > 0.0 and math.isfinite(m) and math.isfinite(v)):
        raise ValueError(
            f"limit statistics under/overflowed at epsilon={epsilon}, "
            f"beta={beta} (m={m!r}, v={v!r})")
    ratio = m / math.sqrt(v)
    return GaussianLimitStats(m=m, v=v, ratio=ratio, p_plus=_phi(ratio))


# ---------------------------------------------------------------------------
# exact Gaussian stepping
# ---------------------------------------------------------------------------

def _sigma_eff(params: NormalFormParams) -> float:
    return params.epsilon ** (params.alpha + 0.5)


def _transition_tables(params: NormalFormParams, grid: TimeGrid,
                       noise_on: float = 1.0):
    """Per-step (F, psi, chol) for the frozen-midpoint exact transition.

    State (q, p):  dq = p dt,
    dp = (t q / eps + 1) eps^{-beta} dt - eps^{-beta} p dt + L dW,
    L = sigma_eff * eps^{-1/2 - beta}.  The mean map comes from the 3x3
    augmented exponential, the noise covariance from the 4x4 block
    exponential; both use t frozen at the step midpoint.
    """
    eps, beta = params.epsilon, params.beta
    theta = eps ** (-beta)
    ell = _sigma_eff(params) * theta / math.sqrt(eps) * noise_on
    h = grid.dt
    t_mid = grid.times[:-1] + 0.5 * h
    n = grid.n_steps

    a21 = theta * t_mid / eps
    aff = np.zeros((n, 3, 3))
    aff[:, 0, 1] = 1.0
    aff[:, 1, 0] = a21
    aff[:, 1, 1] = -theta
    aff[:, 1, 2] = theta
    van = np.zeros((n, 4, 4))
    van[:, 0, 1] = -1.0
    van[:, 1, 0] = -a21
    van[:, 1, 1] = theta
    van[:, 1, 3] = ell * ell
    van[:, 2, 3] = a21
    van[:, 3, 2] = 1.0
    van[:, 3, 3] = -theta
    exp_aff = scipy.linalg.expm(aff * h)
    exp_van = scipy.linalg.expm(van * h)

    fmat = exp_aff[:, :2, :2]
    psi = exp_aff[:, :2, 2]
    f22 = exp_van[:, 2:, 2:]
    cov = np.swapaxes(f22, 1, 2) @ exp_van[:, :2, 2:]
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    if noise_on == 0.0:
        chol = np.zeros_like(cov)
    else:
        chol = np.linalg.cholesky(cov)
    return fmat, psi, chol


_CHANNEL_LINEAR = 200    # disjoint from the noise layer's channel space


def _path_generator(seed: int, path_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed,
                                spawn_key=(path_index, _CHANNEL_LINEAR))
    return np.random.Generator(np.random.PCG64DXSM(ss))


_BLOCK = 512


def _flat_tables(params: NormalFormParams, grid: TimeGrid,
                 noise_on: float = 1.0):
    # unrolled per-step coefficients; chol is lower triangular so c01 = 0
    fmat, psi, chol = _transition_tables(params, grid, noise_on)
    return (fmat[:, 0, 0], fmat[:, 0, 1], fmat[:, 1, 0], fmat[:, 1, 1],
            psi[:, 0], psi[:, 1], chol[:, 0, 0], chol[:, 1, 0], chol[:, 1, 1])


def _end_states(params: NormalFormParams, grid: TimeGrid, n_paths: int,
                seed: int) -> np.ndarray:
    """(n_paths, 2) array of (q, p) at grid end, zero initial conditions.

    The update is written as the same elementwise expressions the
    single-path driver uses, so ensemble members are bit-identical to
    linear_path runs with matching (seed, path_index).
    """
    f00, f01, f10, f11, b0, b1, c00, c10, c11 = _flat_tables(params, grid)
    gens = [_path_generator(seed, k) for k in range(n_paths)]
    q = np.zeros(n_paths)
    p = np.zeros(n_paths)
    n = grid.n_steps
    for k0 in range(0, n, _BLOCK):
        kb = min(_BLOCK, n - k0)
        z = np.empty((n_paths, kb, 2))
        for i, g in enumerate(gens):
            z[i] = g.standard_normal((kb, 2))
        for j in range(kb):
            k = k0 + j
            z0, z1 = z[:, j, 0], z[:, j, 1]
            q, p = (f00[k] * q + f01[k] * p + b0[k] + c00[k] * z0,
                    f10[k] * q + f11[k] * p + b1[k] + c10[k] * z0 + c11[k] * z1)
    return np.column_stack([q, p])


def linear_path(params: NormalFormParams, grid: TimeGrid, seed: int,
                path_index: int = 0, noise_on: bool = True) -> Path:
    """One trajectory of the linear pair, exact transitions per step.

    Bit-identical to the corresponding member of an ensemble run with the
    same (seed, path_index): both drivers consume the per-path stream in
    step order and apply the same elementwise update expressions.
    """
    f00, f01, f10, f11, b0, b1, c00, c10, c11 = _flat_tables(
        params, grid, noise_on=1.0 if noise_on else 0.0)
    gen = _path_generator(seed, path_index)
    n = grid.n_steps
    q = np.empty(n + 1)
    p = np.empty(n + 1)
    q[0] = p[0] = 0.0
    for k in range(n):
        z0, z1 = gen.standard_normal(2)
        q[k + 1], p[k + 1] = (
            f00[k] * q[k] + f01[k] * p[k] + b0[k] + c00[k] * z0,
            f10[k] * q[k] + f11[k] * p[k] + b1[k] + c10[k] * z0 + c11[k] * z1)
    return Path(grid=grid, q=q, p=p)


def moment_evolution(params: NormalFormParams, grid: TimeGrid):
    """Scheme-exact mean (n+1, 2) and covariance (n+1, 2, 2) trajectories.

    These are the moments of the simulated process itself (frozen-midpoint
    transitions), so they isolate the time-freezing defect from sampling
    noise when compared against the continuous-time moment equations.
    """
    fmat, psi, chol = _transition_tables(params, grid)
    n = grid.n_steps
    means = np.zeros((n + 1, 2))
    covs = np.zeros((n + 1, 2, 2))
    for k in range(n):
        means[k + 1] = fmat[k] @ means[k] + psi[k]
        covs[k + 1] = fmat[k] @ covs[k] @ fmat[k].T + chol[k] @ chol[k].T
    return means, covs


# ---------------------------------------------------------------------------
# renormalized tail
# ---------------------------------------------------------------------------

def _log_renorm_factor(t_end: float, params: NormalFormParams) -> float:
    eps, beta = params.epsilon, params.beta
    arg = eps ** (-(1.0 + beta) / 3.0) * (t_end + eps ** (1.0 - beta) / 4.0)
    if arg <= 0.0:
        raise ValueError(
            f"renormalization needs the growing-solution regime, got "
            f"argument {arg:g} at t = {t_end:g}")
    return (0.5 * t_end * eps ** (-beta) - log_bi(arg).item()
            - math.log(math.pi) - (1.0 - 2.0 * beta) / 3.0 * math.log(eps))


def _apply_log_factor(values: np.ndarray, log_f: float) -> np.ndarray:
    # sign * exp(log_f + log|q|): survives factors whose own exp overflows
    out = np.zeros_like(values)
    nz = values != 0.0
    with np.errstate(over="ignore"):
        out[nz] = np.sign(values[nz]) * np.exp(log_f + np.log(np.abs(values[nz])))
    if not np.all(np.isfinite(out)):
        raise ValueError(
            f"renormalized value out of double range (log factor {log_f:g})")
    return out


def renormalize_value(q_end: float, t_end: float,
                      params: NormalFormParams) -> float:
    """Map a raw end value q0(t_end) to the renormalized tail variable.

    The growth factor exp(t eps^-beta / 2) / (pi eps^{(1-2 beta)/3} Bi(...))
    is combined with the value in log space so that no intermediate
    overflows when the factors individually leave double range.
    """
    log_f = _log_renorm_factor(t_end, params)
    return float(_apply_log_factor(np.asarray([q_end]), log_f)[0])


def renormalized_tail(path: Path, params: NormalFormParams) -> float:
    """The renormalized process at the path's final grid time."""
    return renormalize_value(float(path.q[-1]), float(path.grid.times[-1]),
                             params)


def tail_ensemble(params: NormalFormParams, grid: TimeGrid, n_paths: int,
                  seed: int) -> np.ndarray:
    """Renormalized end values across an ensemble (one factor, shared)."""
    ends = _end_states(params, grid, n_paths, seed)
    return _apply_log_factor(ends[:, 0],
                             _log_renorm_factor(float(grid.times[-1]), params))


# ---------------------------------------------------------------------------
# ensemble front ends
# ---------------------------------------------------------------------------

_ESCAPE_LEVEL = 1.0
_DEFAULT_DT = 1e-3       # exact transitions: dt bounds only the freezing defect


def default_grid(params: NormalFormParams) -> TimeGrid:
    """The grid ensemble runs use when none is given: [-T, t2] at dt 1e-3."""
    return TimeGrid(-params.T, params.t2, _DEFAULT_DT)


def simulate_linear(params: NormalFormParams, n_paths: int,
                    grid: TimeGrid | None = None, seed: int = 0,
                    escape_level: float = _ESCAPE_LEVEL) -> McSummary:
    """Sign statistics of q0 at the end of the grid.

    A path is decided when |q0(t_end)| >= escape_level; the summary flags
    the run when more than 1% stay undecided (then t_end was too early).
    """
    if grid is None:
        grid = default_grid(params)
    q_end = _end_states(params, grid, n_paths, seed)[:, 0]
    n_plus = int(np.count_nonzero(q_end >= escape_level))
    n_minus = int(np.count_nonzero(q_end <= -escape_level))
    return McSummary.from_counts(n_plus, n_minus,
                                 n_paths - n_plus - n_minus)


def escape_outcomes(config: EnsembleConfig) -> tuple[int, int, int, int]:
    """Counts adapter used by the Monte Carlo driver."""
    s = simulate_linear(config.params, config.n_paths, config.resolve_grid(),
                        config.seed)
    return s.n_right, s.n_left, s.n_undecided, 0
