"""Path instrumentation and Monte Carlo estimation.

Strips are time-dependent bands in the (q, t) plane; exit times and
classifications reduce a path to the discrete outcomes the probability
statements are about.  Ensembles aggregate per-path outcomes through a
commutative counts monoid, so partial results can be merged in any order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ._grid import Path, TimeGrid
from .model import (
    NormalFormParams,
    PotentialSpec,
    default_potential,
    deterministic_solve,
)
from .sde import (
    GridMismatchError,
    NoiseStream,
    dt_max,
    integrate_chain,
    integrate_overdamped,
    integrate_underdamped,
)

__all__ = [
    "AuditReport",
    "Classification",
    "EnsembleConfig",
    "EnsembleError",
    "ExitEvent",
    "McSummary",
    "Outcome",
    "StripKind",
    "StripSpec",
    "SweepRow",
    "SymmetryReport",
    "classify_path",
    "comparison_audit",
    "comparison_envelope",
    "count_outcomes",
    "exit_time",
    "finalize_counts",
    "h_star",
    "iter_ensemble",
    "k_exit_deadline",
    "mc_estimate",
    "strip_exit_symmetry",
    "t_star",
    "threshold_sweep",
    "wilson_interval",
]

_Z95 = 1.959963984540054


class EnsembleError(RuntimeError):
    """An ensemble run violated its quality budget (see message)."""


# ---------------------------------------------------------------------------
# strips
# ---------------------------------------------------------------------------

class StripKind(enum.Enum):
    B_h = "B_h"            # band of half-width h*sqrt(xi(t)) around zero deviation
    K_kappa = "K_kappa"    # interior of the parabola |q| <= sqrt((1-kappa) t)
    S_h = "S_h"            # diffusion-dominated strip |q| < h/sqrt(t)
    A_tau_h = "A_tau_h"    # tracking band around a restarted deterministic path


@dataclass(frozen=True, eq=False)
class StripSpec:
    """One time-dependent strip with a positive boundary half-width.

    ``boundary(t)`` is the half-width and ``center(t)`` the strip's middle;
    a point is inside while |q - center(t)| <= boundary(t) and t lies in
    [t_lo, t_hi].  Tabulated data (the variance profile, the reference
    deterministic path) is interpolated linearly.
    """

    kind: StripKind
    t_lo: float
    t_hi: float
    h: float | None = None
    kappa: float | None = None
    tau: float | None = None
    ref_times: np.ndarray | None = None
    ref_halfwidth: np.ndarray | None = None
    ref_center: np.ndarray | None = None

    def __post_init__(self):
        if not (math.isfinite(self.t_lo) and self.t_lo < self.t_hi):
            raise ValueError("strip time domain is empty or not finite")
        if self.ref_times is not None:
            lo, hi = float(self.ref_times[0]), float(self.ref_times[-1])
            if lo > self.t_lo + 1e-12 or (math.isfinite(self.t_hi)
                                          and hi < self.t_hi - 1e-12):
                raise ValueError("reference table does not cover the strip domain")
        probe = np.linspace(self.t_lo, self._probe_end(), 257)
        w = self.boundary(probe)
        if not (np.all(np.isfinite(w)) and np.all(w > 0.0)):
            raise ValueError("strip boundary must be positive and finite "
                             "on the declared time domain")

    def _probe_end(self) -> float:
        if math.isfinite(self.t_hi):
            return self.t_hi
        return self.t_lo + 1e3      # unbounded strips decay monotonically

    # -- constructors ------------------------------------------------------

    @staticmethod
    def deviation_band(h: float, params: NormalFormParams, times, xi) -> "StripSpec":
        """Band |y| <= h*sqrt(xi(t)) for the deviation from the deterministic
        path, live on [-T, sqrt(eps)]."""
        times = np.asarray(times, dtype=float)
        xi = np.asarray(xi, dtype=float)
        if h <= 0:
            raise ValueError("h must be positive")
        return StripSpec(kind=StripKind.B_h, t_lo=-params.T,
                         t_hi=math.sqrt(params.epsilon), h=float(h),
                         ref_times=times, ref_halfwidth=h * np.sqrt(xi))

    @staticmethod
    def parabola_interior(kappa: float, params: NormalFormParams) -> "StripSpec":
        """Region |q| <= sqrt((1-kappa) t) from sqrt(eps) on."""
        if not 0.0 < kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        return StripSpec(kind=StripKind.K_kappa,
                         t_lo=math.sqrt(params.epsilon), t_hi=math.inf,
                         kappa=float(kappa))

    @staticmethod
    def diffusive_strip(h: float, params: NormalFormParams) -> "StripSpec":
        """Strip |q| < h/sqrt(t) from sqrt(eps) on."""
        if h <= 0:
            raise ValueError("h must be positive")
        return StripSpec(kind=StripKind.S_h,
                         t_lo=math.sqrt(params.epsilon), t_hi=math.inf,
                         h=float(h))

    @staticmethod
    def tracking_band(h: float, tau: float, ref_path: Path, xi) -> "StripSpec":
        """Band |q - q_ref(t)| <= h*sqrt(xi(t)) for t >= tau, following a
        deterministic path restarted at tau."""
        if h <= 0:
            raise ValueError("h must be positive")
        xi = np.asarray(xi, dtype=float)
        times = ref_path.grid.times
        return StripSpec(kind=StripKind.A_tau_h, t_lo=float(tau),
                         t_hi=float(times[-1]), h=float(h), tau=float(tau),
                         ref_times=times, ref_halfwidth=h * np.sqrt(xi),
                         ref_center=ref_path.q)

    # -- evaluators --------------------------------------------------------

    def boundary(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind is StripKind.K_kappa:
            return np.sqrt((1.0 - self.kappa) * t)
        if self.kind is StripKind.S_h:
            return self.h / np.sqrt(t)
        return np.interp(t, self.ref_times, self.ref_halfwidth)

    def center(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.ref_center is None:
            return np.zeros_like(t)
        return np.interp(t, self.ref_times, self.ref_center)


@dataclass(frozen=True)
class ExitEvent:
    """First grid time outside a strip, with the crossing side."""
    time: float
    side: str          # "upper" | "lower"

    def __post_init__(self):
        if self.side not in ("upper", "lower"):
            raise ValueError("side must be 'upper' or 'lower'")


def exit_time(path: Path, strip: StripSpec) -> ExitEvent | None:
    """First grid time at which the path is outside the strip, or None.

    Only grid points inside the strip's time domain are examined; a path
    whose grid misses the domain reports no exit.
    """
    t = path.grid.times
    mask = (t >= strip.t_lo - 1e-12) & (t <= strip.t_hi)
    if not mask.any():
        return None
    tt = t[mask]
    dev = path.q[mask] - strip.center(tt)
    outside = np.abs(dev) > strip.boundary(tt)
    hits = np.nonzero(outside)[0]
    if hits.size == 0:
        return None
    k = hits[0]
    return ExitEvent(time=float(tt[k]), side="upper" if dev[k] > 0 else "lower")


def h_star(sigma: float, h0: float = 3.0) -> float:
    """Reference strip half-width h0*sigma*sqrt(|ln sigma|)."""
    return h0 * sigma * math.sqrt(abs(math.log(sigma)))


def t_star(params: NormalFormParams, k: float = 3.0, h0: float = 3.0) -> float:
    """Time by which the diffusive strip at h_star is typically left."""
    hs = h_star(params.sigma, h0)
    return math.sqrt(2.0 * k * params.epsilon * math.log(hs / params.sigma))


def k_exit_deadline(params: NormalFormParams, k: float = 3.0) -> float:
    """Deadline sqrt(2 k eps |ln sigma|) for leaving the parabola interior."""
    return math.sqrt(2.0 * k * params.epsilon * abs(math.log(params.sigma)))


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

class Outcome(enum.Enum):
    RIGHT = "Right"
    LEFT = "Left"
    UNDECIDED = "Undecided"


@dataclass(frozen=True)
class Classification:
    outcome: Outcome
    t1: float
    margin: float        # the gamma used
    score: float         # inf of q/sqrt(t) on the window (sup for Left)


def classify_path(path: Path, params: NormalFormParams) -> Classification:
    """Decide the side by the sign of q/sqrt(t) uniformly on [t1, t2].

    Right if the infimum over grid points exceeds +gamma, Left if the
    supremum is below -gamma, Undecided otherwise.  Right and Left are
    mutually exclusive because gamma > 0.
    """
    t1, t2 = params.t1, params.t2
    if t1 >= t2:
        raise ValueError(f"classification window is empty: t1 = {t1:g} >= t2 = {t2:g}")
    t = path.grid.times
    if t[0] > t1 + 1e-12 or t[-1] < t2 - 1e-12:
        raise ValueError("path does not cover the classification window")
    mask = (t >= t1 - 1e-12) & (t <= t2 + 1e-12)
    ratio = path.q[mask] / np.sqrt(t[mask])
    lo, hi = float(ratio.min()), float(ratio.max())
    if lo > params.gamma:
        return Classification(Outcome.RIGHT, t1, params.gamma, lo)
    if hi < -params.gamma:
        return Classification(Outcome.LEFT, t1, params.gamma, hi)
    return Classification(Outcome.UNDECIDED, t1, params.gamma, lo)


# ---------------------------------------------------------------------------
# ensemble summaries
# ---------------------------------------------------------------------------

def wilson_interval(k: int, n: int, z: float = _Z95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion; (0, 1) when n = 0."""
    if n == 0:
        return (0.0, 1.0)
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    phat = k / n
    denom = 1.0 + z * z / n
    center = phat + z * z / (2.0 * n)
    half = z * math.sqrt(phat * (1.0 - phat) / n + z * z / (4.0 * n * n))
    # the exact endpoints are 0 and 1 at the binomial edges; rounding in the
    # radical would otherwise push them just inside and break containment
    lo = 0.0 if k == 0 else max((center - half) / denom, 0.0)
    hi = 1.0 if k == n else min((center + half) / denom, 1.0)
    return (lo, hi)


@dataclass(frozen=True)
class McSummary:
    """Outcome counts with Wilson 95% intervals; a commutative monoid under
    merge (counts add, derived statistics are recomputed)."""

    n_total: int
    n_right: int
    n_left: int
    n_undecided: int
    n_truncated: int
    p_right: float
    p_left: float
    ci_right: tuple[float, float]
    ci_left: tuple[float, float]
    flags: tuple[str, ...] = ()

    @staticmethod
    def from_counts(n_right: int, n_left: int, n_undecided: int,
                    n_truncated: int = 0) -> "McSummary":
        for v in (n_right, n_left, n_undecided, n_truncated):
            if v < 0:
                raise ValueError("counts must be nonnegative")
        n = n_right + n_left + n_undecided
        flags = []
        if n == 0:
            flags.append("empty")
        if n_truncated > 0:
            flags.append("truncated-paths")
        if n > 0 and n_undecided / n > 0.01:
            flags.append("many-undecided")
        return McSummary(
            n_total=n, n_right=n_right, n_left=n_left,
            n_undecided=n_undecided, n_truncated=n_truncated,
            p_right=n_right / n if n else 0.0,
            p_left=n_left / n if n else 0.0,
            ci_right=wilson_interval(n_right, n),
            ci_left=wilson_interval(n_left, n),
            flags=tuple(flags))

    def merge(self, other: "McSummary") -> "McSummary":
        return McSummary.from_counts(
            self.n_right + other.n_right,
            self.n_left + other.n_left,
            self.n_undecided + other.n_undecided,
            self.n_truncated + other.n_truncated)


@dataclass(frozen=True)
class SymmetryReport:
    """Upper-boundary exit fraction of an ensemble against one strip."""
    n_exits: int
    n_upper: int
    fraction: float
    se: float
    insufficient: bool


def strip_exit_symmetry(ensemble, strip: StripSpec) -> SymmetryReport:
    """Fraction of exits through the upper boundary.  Fewer than 100 exits
    sets the insufficient-data flag (the fraction is still reported)."""
    n_exits = n_upper = 0
    for path in ensemble:
        ev = exit_time(path, strip)
        if ev is not None:
            n_exits += 1
            n_upper += ev.side == "upper"
    frac = n_upper / n_exits if n_exits else 0.0
    se = math.sqrt(0.25 / n_exits) if n_exits else math.inf
    return SymmetryReport(n_exits=n_exits, n_upper=n_upper, fraction=frac,
                          se=se, insufficient=n_exits < 100)


# ---------------------------------------------------------------------------
# Monte Carlo driver
# ---------------------------------------------------------------------------

_MODELS = ("overdamped", "underdamped", "linear", "chain")
_TRUNCATION_BUDGET = 1e-3


@dataclass(frozen=True, eq=False)
class EnsembleConfig:
    """Everything mc_estimate needs; deterministic given (config, seed).

    x0 = None picks the model's natural start: 0 for the normal forms,
    the co-moving midpoint for the chain.
    """

    model: str
    params: NormalFormParams
    n_paths: int
    seed: int
    x0: float | None = None
    v0: float = 0.0
    x0_mode: str = "fixed"          # "fixed" | "uniform"
    x0_lo: float = -1.0
    x0_hi: float = 1.0
    h_rel: float = 0.02
    bias_scale: float = 1.0         # 0 runs the unbiased comparison process
    grid: TimeGrid | None = None
    potential: PotentialSpec | None = None   # chain only
    chain_t_end: float = 2.0

    def __post_init__(self):
        if self.model not in _MODELS:
            raise ValueError(f"model must be one of {_MODELS}, got {self.model!r}")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.x0_mode not in ("fixed", "uniform"):
            raise ValueError("x0_mode must be 'fixed' or 'uniform'")
        if self.model != "chain" and self.potential is not None:
            raise ValueError("potential is only meaningful for the chain model")
        if self.model in ("chain", "linear") and self.bias_scale != 1.0:
            raise ValueError("bias_scale only applies to the normal forms")
        if self.model == "linear" and (
                self.x0 not in (None, 0.0) or self.v0 != 0.0
                or self.x0_mode != "fixed"):
            raise ValueError("the linear model always starts at rest from 0")

    def resolve_grid(self) -> TimeGrid:
        if self.grid is not None:
            return self.grid
        if self.model == "linear":
            from .linear import default_grid   # deferred: linear sits above this layer
            return default_grid(self.params)
        dt = dt_max(self.params, self.h_rel)
        if self.model == "chain":
            return TimeGrid(0.0, self.chain_t_end, dt)
        return TimeGrid(-self.params.T, self.params.t2, dt)


def _classify_chain(path: Path, potential: PotentialSpec) -> Outcome:
    # first bond to open past the cutoff decides the side
    span = 2.0 * potential.a * (1.0 + path.grid.times)
    right = np.nonzero(span - path.q > potential.b)[0]
    left = np.nonzero(path.q > potential.b)[0]
    k_right = right[0] if right.size else np.inf
    k_left = left[0] if left.size else np.inf
    if k_right == np.inf and k_left == np.inf:
        return Outcome.UNDECIDED
    return Outcome.RIGHT if k_right <= k_left else Outcome.LEFT


def iter_ensemble(config: EnsembleConfig, start: int = 0,
                  stop: int | None = None):
    """Yield (path, outcome) for members start..stop-1, in index order.

    This is the single source of path generation for everything built on
    ensembles: mc_estimate consumes it for counts, the batch front end for
    path dumps and pooled chunks.  Member k depends only on (config, k),
    never on the requested range, so chunked runs recompose exactly.  The
    linear model has no pathwise representation here; use its own module
    for trajectories.
    """
    if config.model == "linear":
        raise ValueError("the linear model is simulated by its own module")
    stop = config.n_paths if stop is None else stop
    if not 0 <= start <= stop <= config.n_paths:
        raise ValueError(f"bad member range [{start}, {stop}) for "
                         f"n_paths={config.n_paths}")
    grid = config.resolve_grid()
    params = config.params
    potential = None
    if config.model == "chain":
        potential = config.potential or default_potential()
    base = NoiseStream(seed=config.seed, grid=grid)
    default_x0 = 0.0
    if config.model == "chain":
        default_x0 = potential.a * (1.0 + grid.t_start)
    for k in range(start, stop):
        ns = base.for_path(k)
        x0 = config.x0 if config.x0 is not None else default_x0
        if config.x0_mode == "uniform":
            x0 = ns.initial_uniform(config.x0_lo, config.x0_hi)
        if config.model == "overdamped":
            path = integrate_overdamped(params, x0, grid, ns,
                                        bias_scale=config.bias_scale,
                                        h_rel=config.h_rel)
            out = classify_path(path, params).outcome
        elif config.model == "underdamped":
            path = integrate_underdamped(params, x0, config.v0, grid, ns,
                                         bias_scale=config.bias_scale,
                                         h_rel=config.h_rel)
            out = classify_path(path, params).outcome
        else:
            path = integrate_chain(params, potential, x0, potential.a, grid,
                                   ns, h_rel=config.h_rel)
            out = _classify_chain(path, potential)
        yield path, out


def mc_estimate(config: EnsembleConfig) -> McSummary:
    """Outcome summary over config.n_paths independent runs.

    Truncated paths beyond the 0.1% budget abort with diagnostics; under
    the budget they only set the truncated-paths flag.
    """
    if config.model == "linear":
        from .linear import escape_outcomes   # deferred: linear sits above this layer
        counts = escape_outcomes(config)
        return McSummary.from_counts(*counts)

    return finalize_counts(config, count_outcomes(iter_ensemble(config)))


def count_outcomes(members) -> tuple[int, int, int, int]:
    """Fold (path, outcome) pairs into (right, left, undecided, truncated)."""
    n_right = n_left = n_undecided = n_truncated = 0
    for path, out in members:
        n_truncated += path.truncated
        if out is Outcome.RIGHT:
            n_right += 1
        elif out is Outcome.LEFT:
            n_left += 1
        else:
            n_undecided += 1
    return n_right, n_left, n_undecided, n_truncated


def finalize_counts(config: EnsembleConfig,
                    counts: tuple[int, int, int, int]) -> McSummary:
    """Counts to summary, enforcing the truncation budget with diagnostics."""
    n_truncated = counts[3]
    grid = config.resolve_grid()
    params = config.params
    if n_truncated > _TRUNCATION_BUDGET * config.n_paths:
        raise EnsembleError(
            f"{n_truncated} of {config.n_paths} paths hit the state clamp "
            f"(budget {_TRUNCATION_BUDGET:.1%}); first offending seed "
            f"{config.seed}, model {config.model}, eps {params.epsilon:g}, "
            f"sigma {params.sigma:g}, dt {grid.dt:g}")
    return McSummary.from_counts(*counts)


# ---------------------------------------------------------------------------
# threshold sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    summary: McSummary


def _default_eps_grid(sigma: float) -> list[float]:
    return [sigma ** e for e in (2.0, 5.0 / 3.0, 4.0 / 3.0, 1.0, 2.0 / 3.0)]


def threshold_sweep(sigma: float, n_paths: int, seed: int,
                    eps_grid=None, model: str = "overdamped",
                    T: float = 1.0, h_rel: float = 0.1,
                    c1_time: float = 2.0, gamma: float = 0.3,
                    beta: float = 3.0, map_fn=map) -> tuple[list[SweepRow], bool]:
    """p_right across an epsilon grid at fixed sigma.

    Returns the rows (ascending epsilon) and a monotonicity diagnostic:
    True when p_right never decreases beyond what the 95% intervals allow.
    Each grid point gets its own decorrelated sub-seed and a window end
    max(4 t1, 20 sqrt(eps)) long enough to classify at that epsilon.

    map_fn lets a caller fan grid points out to a worker pool (it must
    preserve order, like Executor.map); results do not depend on it because
    every point is seeded by its own index.
    """
    eps_grid = sorted(_default_eps_grid(sigma) if eps_grid is None else eps_grid)

    def point(item):
        i, eps = item
        t1 = c1_time * math.sqrt(eps * abs(math.log(sigma)))
        t2 = max(4.0 * t1, 20.0 * math.sqrt(eps))
        params = NormalFormParams(epsilon=eps, sigma=sigma, beta=beta, T=T,
                                  t2=t2, c1_time=c1_time, gamma=gamma)
        sub = int(np.random.SeedSequence(
            entropy=seed, spawn_key=(i,)).generate_state(1, np.uint64)[0])
        cfg = EnsembleConfig(model=model, params=params, n_paths=n_paths,
                             seed=sub, h_rel=h_rel)
        return SweepRow(epsilon=eps, summary=mc_estimate(cfg))

    rows = list(map_fn(point, enumerate(eps_grid)))
    monotone = True
    for a, b in zip(rows, rows[1:]):
        if b.summary.p_right < a.summary.p_right:
            # allow a dip only while the intervals still overlap
            if b.summary.ci_right[1] < a.summary.ci_right[0]:
                monotone = False
    return rows, monotone


# ---------------------------------------------------------------------------
# ordering audits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditReport:
    """Outcome of checking A(t) + envelope(t) <= B(t) on a shared grid."""
    max_violation: float               # max of A + env - B (negative: slack)
    first_violation_time: float | None
    n_violations: int


def comparison_audit(path_a: Path, path_b: Path, envelope=None) -> AuditReport:
    """Audit the pointwise ordering A + envelope <= B.

    envelope may be None (zero), an array on the shared grid, or a callable
    of the time array.  The violation is signed: its maximum is <= 0 exactly
    when the claimed ordering holds everywhere.
    """
    if path_a.grid != path_b.grid:
        raise GridMismatchError("audited paths live on different grids")
    t = path_a.grid.times
    if envelope is None:
        env = 0.0
    elif callable(envelope):
        env = np.asarray(envelope(t), dtype=float)
    else:
        env = np.asarray(envelope, dtype=float)
        if env.shape != t.shape:
            raise ValueError("envelope array must match the grid")
    gap = path_a.q + env - path_b.q
    worst = float(np.max(gap))
    bad = np.nonzero(gap > 0.0)[0]
    return AuditReport(
        max_violation=worst,
        first_violation_time=float(t[bad[0]]) if bad.size else None,
        n_violations=int(bad.size))


def comparison_envelope(params: NormalFormParams, grid: TimeGrid):
    """(integral, growth) envelope arrays for the biased-vs-unbiased bounds.

    growth[k] = exp((t_k^2 - t_0^2)/(2 eps)) and integral[k] approximates
    int_{t_0}^{t_k} exp((t_k^2 - s^2)/(2 eps)) ds by a per-step trapezoid
    carried through the same growth recursion, which avoids forming the
    huge intermediate exponentials directly.
    """
    t = grid.times
    n = grid.n_steps
    growth = np.empty(n + 1)
    integral = np.empty(n + 1)
    growth[0] = 1.0
    integral[0] = 0.0
    dt = grid.dt
    for k in range(n):
        g = math.exp((t[k + 1] ** 2 - t[k] ** 2) / (2.0 * params.epsilon))
        growth[k + 1] = growth[k] * g
        integral[k + 1] = g * (integral[k] + 0.5 * dt) + 0.5 * dt
    return integral, growth
