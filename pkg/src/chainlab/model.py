"""Normal-form model: drift, potential, equilibrium branches, deterministic
dynamics, and the three-particle chain force.

The central object is the scalar normal form

    dq = (1/eps) * (t*q - q^3 + eps) dt + noise,

a pitchfork bifurcation crossed at unit speed in the slow time t, with the
constant +eps tilt breaking the left/right symmetry.  Everything here is
noise-free; the stochastic layer lives in chainlab.sde.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import PPoly

from ._grid import Path, TimeGrid

__all__ = [
    "DegenerateInitialization",
    "EquilibriumBranches",
    "NormalFormParams",
    "PotentialConstructionError",
    "PotentialSpec",
    "StiffnessError",
    "chain_drift",
    "default_potential",
    "deterministic_solve",
    "drift_normal_form",
    "drift_unscaled",
    "equilibrium_branches",
    "fold_time",
    "potential_v",
    "xi_variance",
]


class StiffnessError(RuntimeError):
    """Adaptive ODE solve drove the step size below machine resolution."""


class DegenerateInitialization(ValueError):
    """Initial condition of the variance ODE is singular (a(t_start) = 0)."""


class PotentialConstructionError(ValueError):
    """Requested pairwise-potential shape violates its construction checks."""


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalFormParams:
    """Parameters of the normal form and its instrumentation.

    sigma and alpha are linked by sigma = epsilon**(alpha + 1/2); alpha may
    be omitted, in which case it is derived from sigma.  When alpha is given
    it is taken at face value (the linear layer derives its own noise level
    from alpha, the nonlinear integrators use sigma directly).

    delta is only meaningful for underdamped runs; supplying it switches on
    the validation 0 < delta < beta/2 - 1, which requires beta > 2.
    """

    epsilon: float
    sigma: float
    alpha: float | None = None
    beta: float = 3.0
    T: float = 4.0
    t2: float = 1.5
    kappa: float = 0.58
    gamma: float = 0.3
    c1_time: float = 2.0
    delta: float | None = None

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if not (0.0 < self.sigma < 1.0):
            raise ValueError(f"sigma must be in (0, 1), got {self.sigma}")
        if not self.T >= 1.0:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not self.t2 > 0.0:
            raise ValueError(f"t2 must be > 0, got {self.t2}")
        if not (0.5 < self.kappa < 2.0 / 3.0):
            raise ValueError(f"kappa must be in (1/2, 2/3), got {self.kappa}")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not self.c1_time > 0.0:
            raise ValueError(f"c1_time must be > 0, got {self.c1_time}")
        if self.alpha is None:
            # sigma = eps^(alpha + 1/2)
            object.__setattr__(
                self, "alpha",
                math.log(self.sigma) / math.log(self.epsilon) - 0.5)
        if self.delta is not None:
            if not self.beta > 2.0:
                raise ValueError(
                    f"delta given but beta = {self.beta} <= 2 (underdamped needs beta > 2)")
            if not (0.0 < self.delta < self.beta / 2.0 - 1.0):
                raise ValueError(
                    f"delta must satisfy 0 < delta < beta/2 - 1 = "
                    f"{self.beta / 2.0 - 1.0}, got {self.delta}")

    @property
    def t1(self) -> float:
        """Classification start time c1_time * sqrt(eps |ln sigma|)."""
        return self.c1_time * math.sqrt(self.epsilon * abs(math.log(self.sigma)))


# ---------------------------------------------------------------------------
# drift and potential of the normal form
# ---------------------------------------------------------------------------

def drift_unscaled(q, t, params: NormalFormParams):
    """t*q - q^3 + eps, the drift without the 1/eps prefactor."""
    q = np.asarray(q, dtype=np.float64)
    return t * q - q ** 3 + params.epsilon


def drift_normal_form(q, t, params: NormalFormParams):
    """(t*q - q^3 + eps)/eps; vectorized in q."""
    return drift_unscaled(q, t, params) / params.epsilon


def potential_v(q, t):
    """The double-well potential -t q^2/2 + q^4/4 (without the 1/eps)."""
    q = np.asarray(q, dtype=np.float64)
    q2 = q * q
    return -0.5 * t * q2 + 0.25 * q2 * q2


# ---------------------------------------------------------------------------
# equilibrium branches of the tilted cubic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EquilibriumBranches:
    """Real roots of t*q - q^3 + eps = 0, ordered; the outer two are stable."""

    t: float
    q_plus: float
    q_minus: float | None = None
    q_mid: float | None = None


def fold_time(epsilon: float) -> float:
    """Fold location: below it the tilted cubic has one real root, above three."""
    return (27.0 * epsilon * epsilon / 4.0) ** (1.0 / 3.0)


def _polish(root: float, t: float, eps: float) -> float:
    # one or two Newton steps on f(q) = t q - q^3 + eps; skipped near the
    # fold where f' vanishes at the double root
    for _ in range(2):
        d = t - 3.0 * root * root
        if abs(d) < 1e-8:
            break
        root -= (t * root - root ** 3 + eps) / d
    return root


def equilibrium_branches(t: float, params: NormalFormParams) -> EquilibriumBranches:
    """All real roots of the equilibrium cubic, labeled by ordering.

    q_plus is always the rightmost (the tilted branch the deterministic
    solution tracks); q_minus/q_mid exist only above the fold.
    """
    eps = params.epsilon
    # depressed cubic q^3 - t q - eps = 0: discriminant 4 t^3 - 27 eps^2
    disc = 4.0 * t ** 3 - 27.0 * eps * eps
    if disc >= 0.0:
        # three real roots (double root exactly at the fold)
        r = 2.0 * math.sqrt(t / 3.0)
        arg = (3.0 * eps / (2.0 * t)) * math.sqrt(3.0 / t)
        theta = math.acos(min(1.0, max(-1.0, arg)))
        roots = sorted(
            _polish(r * math.cos(theta / 3.0 - 2.0 * math.pi * k / 3.0), t, eps)
            for k in range(3))
        return EquilibriumBranches(t=t, q_plus=roots[2],
                                   q_minus=roots[0], q_mid=roots[1])
    s = math.sqrt(eps * eps / 4.0 - t ** 3 / 27.0)
    root = float(np.cbrt(eps / 2.0 + s) + np.cbrt(eps / 2.0 - s))
    return EquilibriumBranches(t=t, q_plus=_polish(root, t, eps))


# ---------------------------------------------------------------------------
# deterministic dynamics
# ---------------------------------------------------------------------------

def deterministic_solve(params: NormalFormParams, x0: float, grid: TimeGrid) -> Path:
    """Noise-free normal form on the grid, solved to high accuracy.

    Integrates in the fast time s = t/eps, where the equation reads
    dq/ds = (eps*s) q - q^3 + eps and the step-size controller no longer
    fights the 1/eps factor.
    """
    if not -1.0 <= x0 <= 1.0:
        raise ValueError(f"x0 must lie in [-1, 1], got {x0}")
    eps = params.epsilon

    def rhs(s, y):
        q = y[0]
        return ((eps * s) * q - q ** 3 + eps,)

    s0 = grid.t_start / eps
    s1 = grid.t_end / eps
    sol = solve_ivp(rhs, (s0, s1), (float(x0),), method="DOP853",
                    dense_output=True, rtol=1e-12, atol=1e-14)
    if not sol.success:
        raise StiffnessError(f"deterministic solve failed: {sol.message}")
    q = sol.sol(grid.times / eps)[0]
    return Path(grid=grid, q=q)


def xi_variance(params: NormalFormParams, grid: TimeGrid, q_det) -> np.ndarray:
    """Linearized-variance profile along a reference path.

    Solves eps * xi' = 2 a(t) xi + 1 with a(t) = t - 3 q_det(t)^2 and
    xi(t_start) = 1/(2|a(t_start)|), by exact exponential stepping with the
    coefficient frozen at its per-step average (the stiff part is integrated
    in closed form, so the grid step only limits how well a(t) is resolved).
    """
    q = q_det.q if isinstance(q_det, Path) else np.asarray(q_det, dtype=np.float64)
    times = grid.times
    if q.shape != times.shape:
        raise ValueError("q_det must be sampled on the same grid")
    eps = params.epsilon
    a = times - 3.0 * q * q
    if abs(a[0]) < 1e-14:
        raise DegenerateInitialization(
            f"a(t_start) = {a[0]:.3e}; the initial condition 1/(2|a|) is singular")

    abar = 0.5 * (a[:-1] + a[1:])
    arg = 2.0 * abar * (grid.dt / eps)
    growth = np.exp(arg)
    # expm1(arg)/(2 abar), series fallback where abar ~ 0
    small = np.abs(arg) < 1e-12
    src = np.empty_like(abar)
    nz = ~small
    src[nz] = np.expm1(arg[nz]) / (2.0 * abar[nz])
    src[small] = (grid.dt / eps) * (1.0 + 0.5 * arg[small])

    xi = np.empty_like(times)
    xi[0] = 1.0 / (2.0 * abs(a[0]))
    for k in range(abar.size):
        xi[k + 1] = xi[k] * growth[k] + src[k]
    if not np.all(xi > 0.0):
        raise RuntimeError("variance profile lost positivity; grid too coarse")
    return xi


# ---------------------------------------------------------------------------
# pairwise potential and the three-particle chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PotentialSpec:
    """Finite-range pairwise bond potential with controlled shape.

    U has its minimum at a, vanishes identically beyond b together with all
    derivatives, and U'' has exactly one sign change at c0 in (a, b).  The
    second derivative W = U'' is stored as a piecewise polynomial on
    [0, b]; U' and U are its exact antiderivatives pinned by U'(a) = 0 and
    U(b) = 0.  Below a the potential continues as the quadratic core
    U(a) + U''(a) (q-a)^2 / 2, so evaluators cover all of [0, inf).
    """

    a: float
    b: float
    c0: float
    _w: PPoly = field(repr=False)
    _w1: PPoly = field(repr=False)       # W'
    _w2: PPoly = field(repr=False)       # W''
    _ad: PPoly = field(repr=False)       # antiderivative of W from 0
    _ad2: PPoly = field(repr=False)      # antiderivative of _ad from 0
    _ca: float = field(repr=False, default=0.0)   # _ad(a)
    _cb: float = field(repr=False, default=0.0)   # U offset so U(b) = 0

    def _clamped(self, q, values):
        return np.where(np.asarray(q, dtype=np.float64) >= self.b, 0.0, values)

    def d2u(self, q):
        """U''(q)."""
        return self._clamped(q, self._w(np.minimum(q, self.b)))

    def d4u(self, q):
        """U''''(q)."""
        return self._clamped(q, self._w2(np.minimum(q, self.b)))

    def du(self, q):
        """U'(q); zero at the minimum a and beyond the cutoff b."""
        return self._clamped(q, self._ad(np.minimum(q, self.b)) - self._ca)

    def u(self, q):
        """U(q); zero beyond the cutoff b, negative at the minimum."""
        q = np.asarray(q, dtype=np.float64)
        qc = np.minimum(q, self.b)
        return self._clamped(q, self._ad2(qc) - self._ca * qc - self._cb)

    def du_ppoly_data(self):
        """(breakpoints, coefficients, constant) of U' for compiled kernels."""
        return self._ad.x, self._ad.c, self._ca


def default_potential(a: float = 1.0, b: float = 2.5, w0: float = 2.0,
                      slope: float = 1.0, curvature: float = 2.0) -> PotentialSpec:
    """Construct the reference bond potential from its curvature profile.

    W = U'' is built in three C2-matched pieces: a quartic descent from
    W(a) = w0, then the exact concave parabola -slope*(q-c0) - curvature*(q-c0)^2
    on the window [c0 - 0.2a, c0 + 0.2a] (so the fourth derivative there is
    the constant -2*curvature, negative and bounded away from zero, as the
    chain analysis assumes near the bifurcation), then a quintic tail whose
    free coefficients absorb the constraint integral(W) = 0 on [a, b], which
    makes U' vanish at the cutoff.  c0 = a + (b-a)/3.
    """
    if not (0.0 < a < b):
        raise PotentialConstructionError(f"need 0 < a < b, got a={a}, b={b}")
    if w0 <= 0.0 or slope <= 0.0 or curvature <= 0.0:
        raise PotentialConstructionError("w0, slope, curvature must be positive")
    c0_target = a + (b - a) / 3.0
    wh = 0.2 * a
    if not (a < c0_target - wh and c0_target + wh < b):
        raise PotentialConstructionError(
            f"window [c0 +- 0.2a] = [{c0_target - wh}, {c0_target + wh}] "
            f"does not fit inside (a, b) = ({a}, {b})")

    # window endpoint data (local coordinate s = q - c0)
    w_l = slope * wh - curvature * wh * wh
    wp_l = -slope + 2.0 * curvature * wh
    w_r = -slope * wh - curvature * wh * wh
    wp_r = -slope - 2.0 * curvature * wh
    wpp = -2.0 * curvature

    # left quartic on [a, c0-wh]: value/slope at a, value/slope/curvature at the seam
    L = c0_target - wh - a
    ml = np.array([[1, 0, 0, 0, 0],
                   [0, 1, 0, 0, 0],
                   [1, L, L ** 2, L ** 3, L ** 4],
                   [0, 1, 2 * L, 3 * L ** 2, 4 * L ** 3],
                   [0, 0, 2, 6 * L, 12 * L ** 2]], dtype=np.float64)
    cl = np.linalg.solve(ml, np.array([w0, 0.0, w_l, wp_l, wpp]))

    area_left = float(sum(cl[i] * L ** (i + 1) / (i + 1) for i in range(5)))
    area_win = -curvature * (2.0 * wh ** 3) / 3.0   # odd slope term cancels
    area_right = -(area_left + area_win)

    # right quintic on [c0+wh, b]: C2 seam, C1 zero at b, prescribed integral
    R = b - (c0_target + wh)
    mr = np.array([[1, 0, 0, 0, 0, 0],
                   [0, 1, 0, 0, 0, 0],
                   [0, 0, 2, 0, 0, 0],
                   [1, R, R ** 2, R ** 3, R ** 4, R ** 5],
                   [0, 1, 2 * R, 3 * R ** 2, 4 * R ** 3, 5 * R ** 4],
                   [R, R ** 2 / 2, R ** 3 / 3, R ** 4 / 4, R ** 5 / 5, R ** 6 / 6]],
                  dtype=np.float64)
    cr = np.linalg.solve(mr, np.array([w_r, wp_r, wpp, 0.0, 0.0, area_right]))

    # assemble W as a PPoly on [0, a, c0-wh, c0+wh, b] (degree-descending rows)
    breaks = np.array([0.0, a, c0_target - wh, c0_target + wh, b])
    k = 6
    coeffs = np.zeros((k, 4))
    coeffs[k - 1, 0] = w0                                  # constant core
    coeffs[k - 5:, 1] = cl[::-1]
    # window piece in s = q - c0 rewritten about its left edge e = s + wh
    coeffs[k - 3:, 2] = [-curvature,
                         -slope + 2.0 * curvature * wh,
                         slope * wh - curvature * wh * wh]
    coeffs[k - 6:, 3] = cr[::-1]
    w = PPoly(coeffs, breaks, extrapolate=True)
    ad = w.antiderivative()
    spec = PotentialSpec(a=a, b=b, c0=float("nan"), _w=w,
                         _w1=w.derivative(), _w2=w.derivative(2),
                         _ad=ad, _ad2=ad.antiderivative())
    ca = float(ad(a))
    du_b = float(ad(b)) - ca
    ad2 = spec._ad2
    cb = float(ad2(b)) - ca * b
    object.__setattr__(spec, "_ca", ca)
    object.__setattr__(spec, "_cb", cb)

    # c0 by bisection on W over the window (the construction pins the
    # bracket, bisection pins the root to machine precision)
    lo, hi = c0_target - wh, c0_target + wh
    if not (spec.d2u(lo) > 0.0 > spec.d2u(hi)):
        raise PotentialConstructionError("curvature window does not bracket c0")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if spec.d2u(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    object.__setattr__(spec, "c0", 0.5 * (lo + hi))

    _validate_potential(spec, du_b)
    return spec


def _validate_potential(spec: PotentialSpec, du_b: float) -> None:
    a, b, c0 = spec.a, spec.b, spec.c0
    probs = []
    if abs(du_b) > 1e-12:
        probs.append(f"U'(b) = {du_b:.2e} (integral constraint failed)")
    # smoothness at the cutoff, probed on the raw polynomial (the public
    # evaluators clamp to zero there, which would hide a mismatch)
    if abs(float(spec._w(b))) > 1e-10 or abs(float(spec._w1(b))) > 1e-10:
        probs.append("U'' does not reach zero smoothly at the cutoff")
    qs = np.linspace(a, b, 20001)
    w = spec.d2u(qs)
    interior = np.abs(w) > 1e-9
    changes = int(np.sum(np.diff(np.sign(w[interior])) != 0))
    if changes != 1:
        probs.append(f"U'' has {changes} sign changes on [a, b], need exactly 1")
    window = np.linspace(c0 - 0.2 * a, c0 + 0.2 * a, 2001)
    if not np.all(spec.d4u(window) < 0.0):
        probs.append("U'''' not negative on the bifurcation window [c0 +- 0.2a]")
    if not np.all(spec.du(qs[1:-1]) > -1e-12):
        probs.append("U' dips negative inside (a, b); U would not be monotone there")
    if not float(spec.u(a)) < 0.0:
        probs.append("well depth is not negative at the minimum")
    if probs:
        raise PotentialConstructionError("; ".join(probs))


def chain_drift(positions, t: float, potential: PotentialSpec,
                params: NormalFormParams):
    """Force on the middle particle of the pulled three-particle chain.

    Outer particles are pinned at q_L = 0 and q_R = 2a(1+t) (slow time t);
    the energy is U(q) + U(q_R - q), so the force is -U'(q) + U'(q_R - q).
    At the symmetric configuration q = a(1+t) the force vanishes exactly.
    """
    q = np.asarray(positions, dtype=np.float64)
    span = 2.0 * potential.a * (1.0 + t)
    return -potential.du(q) + potential.du(span - q)
