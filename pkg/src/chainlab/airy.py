"""Airy functions and exponentially weighted Airy integrals.

Self-contained evaluators for Ai, Bi and their derivatives, plus the two
weighted integrals

    airy_laplace(p) = integral of exp(p*s) * Ai(s)   over the real line,
    j_integral(p)   = integral of exp(2*p*s) * Ai(s)**2,

which feed the closed-form limit statistics in :mod:`chainlab.linear`.

scipy.special is deliberately not used.  These four functions are
load-bearing for the package's statistics and their error behaviour has to
be owned here: extended-precision Maclaurin series near the origin, a
modified-Bessel integral representation for Ai on the mid range where the
series cancels badly, and the standard large-argument expansions
(DLMF 9.7) beyond |x| = 8.  Accuracy across zones is pinned by the frozen
reference table in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AiryValue",
    "airy_eval",
    "airy_laplace",
    "j_integral",
    "log_ai",
    "log_bi",
    "wronskian_defect",
]

# Ai(0) and -Ai'(0), 21 significant digits; parsed into longdouble below.
_C1_STR = "0.35502805388781723926"
_C2_STR = "0.25881940379280679841"
_C1 = float(_C1_STR)
_C2 = float(_C2_STR)

_SQRT3 = math.sqrt(3.0)
_SQRTPI = math.sqrt(math.pi)

# Zone seams.  The Maclaurin series runs in longdouble (64-bit mantissa,
# ~18.96 digits).  For Ai at x > 0 the two series branches cancel to
# ~exp(2*zeta) relative size, which at x = 4.5 costs 5.6 digits and at
# x = 8 would cost 13.1; hence Ai switches to the Bessel representation
# already at 4.5 while Bi (no cancellation) rides the series to 8.  On the
# negative side cancellation reaches ~5.8 digits at x = -8, leaving 13
# good digits, which the reference table confirms.
_SEAM_BESSEL = 4.5
_SEAM_ASYM = 8.0
_SERIES_TERMS = 90


@dataclass(frozen=True, slots=True)
class AiryValue:
    """Point values of the Airy pair: Ai, Bi, Ai', Bi' at ``x``."""

    x: float
    ai: float
    bi: float
    dai: float
    dbi: float


# ---------------------------------------------------------------------------
# power series zone
# ---------------------------------------------------------------------------

def _series_fg(x: np.ndarray):
    """Maclaurin sums f, g, f', g' in longdouble for |x| <= 8.

    f = 1 + x^3/6 + ...,  g = x + x^4/12 + ... are the two entire solutions
    with Ai = c1*f - c2*g and Bi = sqrt(3)*(c1*f + c2*g).  Term recurrences
    keep everything in the O(1) range, so no overflow management is needed.
    """
    xl = x.astype(np.longdouble)
    x3 = xl * xl * xl

    f = np.ones_like(xl)
    g = xl.copy()
    df = xl * xl / 2.0
    dg = np.ones_like(xl)

    uf = np.ones_like(xl)          # k-th term of f
    ug = xl.copy()                 # k-th term of g
    tf = df.copy()                 # k-th term of f' (k starts at 1)
    rg = np.ones_like(xl)          # k-th term of g' (k starts at 0)

    for k in range(1, _SERIES_TERMS + 1):
        uf = uf * x3 / ((3.0 * k) * (3.0 * k - 1.0))
        f += uf
        ug = ug * x3 / ((3.0 * k + 1.0) * (3.0 * k))
        g += ug
        if k >= 2:
            tf = tf * x3 / ((3.0 * k - 3.0) * (3.0 * k - 1.0))
            df += tf
        rg = rg * x3 / ((3.0 * k - 2.0) * (3.0 * k))
        dg += rg
    return f, g, df, dg


_C1L = np.longdouble(_C1_STR)
_C2L = np.longdouble(_C2_STR)
_SQRT3L = np.sqrt(np.longdouble(3))


def _eval_series(x: np.ndarray):
    f, g, df, dg = _series_fg(x)
    ai = (_C1L * f - _C2L * g).astype(np.float64)
    bi = (_SQRT3L * (_C1L * f + _C2L * g)).astype(np.float64)
    dai = (_C1L * df - _C2L * dg).astype(np.float64)
    dbi = (_SQRT3L * (_C1L * df + _C2L * dg)).astype(np.float64)
    return ai, bi, dai, dbi


# ---------------------------------------------------------------------------
# Bessel-integral zone for Ai, Ai' on (4.5, 8]
# ---------------------------------------------------------------------------

# K_nu(z) = int_0^inf exp(-z*cosh(u)) * cosh(nu*u) du for z >= 6.36 here;
# the tail beyond u = 2.7 is below exp(-zeta*(cosh(2.7)-1)) ~ 1e-17 of the
# peak, so a fixed Gauss-Legendre rule on [0, 2.7] suffices.
_GL_N, _GL_W = np.polynomial.legendre.leggauss(96)
_KU = 1.35 * (_GL_N + 1.0)       # nodes on [0, 2.7]
_KW = 1.35 * _GL_W
_COSH_KU = np.cosh(_KU)
_COSH_KU3 = np.cosh(_KU / 3.0)
_COSH_KU23 = np.cosh(2.0 * _KU / 3.0)


def _ai_bessel(x: np.ndarray):
    zeta = (2.0 / 3.0) * x ** 1.5
    e = np.exp(-np.outer(zeta, _COSH_KU))
    k13 = e @ (_KW * _COSH_KU3)
    k23 = e @ (_KW * _COSH_KU23)
    ai = np.sqrt(x / 3.0) / math.pi * k13
    dai = -(x / (math.pi * _SQRT3)) * k23
    return ai, dai


# ---------------------------------------------------------------------------
# large-argument zone (|x| > 8), DLMF 9.7
# ---------------------------------------------------------------------------

def _asym_coeffs(kmax: int):
    u = [1.0]
    v = [1.0]
    for k in range(kmax):
        u.append(u[k] * (6.0 * k + 5.0) * (6.0 * k + 3.0) * (6.0 * k + 1.0)
                 / (216.0 * (k + 1.0) * (2.0 * k + 1.0)))
        v.append(-u[k + 1] * (6.0 * k + 7.0) / (6.0 * k + 5.0))
    return np.asarray(u), np.asarray(v)


# 27 terms: at the seam zeta(8) = 15.08 the smallest retained term is
# ~7e-15 and the series is still monotone decreasing, so a fixed-length
# sum needs no truncation logic anywhere in the contract range.
_UK, _VK = _asym_coeffs(26)
_K_IDX = np.arange(_UK.size)
_SGN = (-1.0) ** _K_IDX
_EVEN_SIGNS = (-1.0) ** np.arange((_UK.size + 1) // 2)   # k in zeta^{-2k}
_ODD_SIGNS = (-1.0) ** np.arange(_UK.size // 2)


def _asym_sums(zeta: np.ndarray):
    """Partial sums S[u,+-] and S[v,+-] of the Poincare series in 1/zeta."""
    t = np.power.outer(1.0 / zeta, _K_IDX)       # (n, K)
    su_p = t @ _UK
    su_m = t @ (_SGN * _UK)
    sv_p = t @ _VK
    sv_m = t @ (_SGN * _VK)
    return su_p, su_m, sv_p, sv_m


def _eval_asym_pos(x: np.ndarray):
    zeta = (2.0 / 3.0) * x ** 1.5
    q = x ** 0.25
    su_p, su_m, sv_p, sv_m = _asym_sums(zeta)
    em = np.exp(-zeta)
    ep = np.exp(zeta)
    ai = em * su_m / (2.0 * _SQRTPI * q)
    bi = ep * su_p / (_SQRTPI * q)
    dai = -q * em * sv_m / (2.0 * _SQRTPI)
    dbi = q * ep * sv_p / _SQRTPI
    return ai, bi, dai, dbi


def _eval_asym_neg(x: np.ndarray):
    z = -x
    zeta = (2.0 / 3.0) * z ** 1.5
    q = z ** 0.25
    om = zeta - math.pi / 4.0
    c, s = np.cos(om), np.sin(om)

    # even/odd split of the Poincare series, alternating signs in zeta^{-2}
    t = np.power.outer(1.0 / zeta, _K_IDX)
    ue = t[:, 0::2] @ (_EVEN_SIGNS * _UK[0::2])
    uo = t[:, 1::2] @ (_ODD_SIGNS * _UK[1::2])
    ve = t[:, 0::2] @ (_EVEN_SIGNS * _VK[0::2])
    vo = t[:, 1::2] @ (_ODD_SIGNS * _VK[1::2])

    ai = (c * ue + s * uo) / (_SQRTPI * q)
    bi = (-s * ue + c * uo) / (_SQRTPI * q)
    dai = q / _SQRTPI * (s * ve - c * vo)
    dbi = q / _SQRTPI * (c * ve + s * vo)
    return ai, bi, dai, dbi


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _eval_arrays(x: np.ndarray):
    """Vectorized (ai, bi, dai, dbi) in float64 for finite real x."""
    x = np.asarray(x, dtype=np.float64)
    ai = np.empty_like(x)
    bi = np.empty_like(x)
    dai = np.empty_like(x)
    dbi = np.empty_like(x)

    near = np.abs(x) <= _SEAM_ASYM
    if np.any(near):
        xs = x[near]
        a, b, da, db = _eval_series(xs)
        mid = xs > _SEAM_BESSEL
        if np.any(mid):
            a2, da2 = _ai_bessel(xs[mid])
            a[mid] = a2
            da[mid] = da2
        ai[near], bi[near], dai[near], dbi[near] = a, b, da, db

    far_p = x > _SEAM_ASYM
    if np.any(far_p):
        ai[far_p], bi[far_p], dai[far_p], dbi[far_p] = _eval_asym_pos(x[far_p])
    far_m = x < -_SEAM_ASYM
    if np.any(far_m):
        ai[far_m], bi[far_m], dai[far_m], dbi[far_m] = _eval_asym_neg(x[far_m])
    return ai, bi, dai, dbi


def airy_eval(x: float) -> AiryValue:
    """Evaluate Ai, Bi, Ai', Bi' at a finite real point.

    Raises ValueError on non-finite input.  Beyond |x| = 100 the values come
    from the same asymptotic expansion and remain usable, but the accuracy
    statement is only made for |x| <= 100; Bi overflows to inf near x = 105,
    which is the honest answer in double precision.
    """
    xf = float(x)
    if not math.isfinite(xf):
        raise ValueError(f"airy_eval requires finite x, got {x!r}")
    a, b, da, db = _eval_arrays(np.array([xf]))
    return AiryValue(x=xf, ai=float(a[0]), bi=float(b[0]),
                     dai=float(da[0]), dbi=float(db[0]))


def wronskian_defect(x) -> np.ndarray:
    """Ai*Bi' - Ai'*Bi - 1/pi, elementwise; a cheap cross-check of all four."""
    a, b, da, db = _eval_arrays(np.atleast_1d(np.asarray(x, dtype=float)))
    return a * db - da * b - 1.0 / math.pi


def log_ai(x) -> np.ndarray:
    """log Ai(x) for x >= 0, stable for large x where Ai itself underflows."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if np.any(x < 0.0):
        raise ValueError("log_ai requires x >= 0 (Ai oscillates for x < 0)")
    out = np.empty_like(x)
    near = x <= _SEAM_ASYM
    if np.any(near):
        a, _, _, _ = _eval_arrays(x[near])
        out[near] = np.log(a)
    far = ~near
    if np.any(far):
        xf = x[far]
        zeta = (2.0 / 3.0) * xf ** 1.5
        _, su_m, _, _ = _asym_sums(zeta)
        out[far] = -zeta + np.log(su_m) - np.log(2.0 * _SQRTPI) - 0.25 * np.log(xf)
    return out


def log_bi(x) -> np.ndarray:
    """log Bi(x) for x >= 0, stable where Bi overflows (x beyond ~105)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if np.any(x < 0.0):
        raise ValueError("log_bi requires x >= 0 (Bi oscillates for x < 0)")
    out = np.empty_like(x)
    near = x <= _SEAM_ASYM
    if np.any(near):
        _, b, _, _ = _eval_arrays(x[near])
        out[near] = np.log(b)
    far = ~near
    if np.any(far):
        xf = x[far]
        zeta = (2.0 / 3.0) * xf ** 1.5
        su_p, _, _, _ = _asym_sums(zeta)
        out[far] = zeta + np.log(su_p) - np.log(_SQRTPI) - 0.25 * np.log(xf)
    return out


# ---------------------------------------------------------------------------
# weighted integrals
# ---------------------------------------------------------------------------

class QuadratureError(RuntimeError):
    """Raised when an integral fails to converge within its budgets."""


# Gauss-Kronrod 7-15 on [-1, 1]: Kronrod nodes/weights plus embedded Gauss.
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])

_GK_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])          # 15 ascending
_GK_WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
# Gauss weights aligned to nodes 1,3,5,7,9,11,13 of the Kronrod set
_G_WEIGHTS = np.zeros(15)
_G_WEIGHTS[1:14:2] = np.concatenate([_WG[:-1], _WG[::-1]])


def _gk_panel(f, a: float, b: float):
    h = 0.5 * (b - a)
    xs = 0.5 * (a + b) + h * _GK_NODES
    fx = f(xs)
    ik = h * float(fx @ _GK_WEIGHTS)
    ig = h * float(fx @ _G_WEIGHTS)
    return ik, abs(ik - ig)


def _adaptive_gk(f, a: float, b: float, tol_abs: float, max_panels: int = 4000):
    import heapq

    ik, err = _gk_panel(f, a, b)
    heap = [(-err, a, b, ik)]
    total, total_err, n = ik, err, 1
    while total_err > tol_abs:
        if n >= max_panels:
            raise QuadratureError(
                f"adaptive quadrature stalled: {n} panels, err {total_err:.3e}")
        neg_err, lo, hi, val = heapq.heappop(heap)
        mid = 0.5 * (lo + hi)
        i1, e1 = _gk_panel(f, lo, mid)
        i2, e2 = _gk_panel(f, mid, hi)
        total += (i1 + i2) - val
        total_err += (e1 + e2) - (-neg_err)
        heapq.heappush(heap, (-e1, lo, mid, i1))
        heapq.heappush(heap, (-e2, mid, hi, i2))
        n += 1
    return total


# 16-point Gauss-Legendre for the oscillatory left tail, one panel per
# period of the squared (or plain) cosine after the w = |s|^{3/2} change
# of variable that makes the phase linear.
_GL16_N, _GL16_W = np.polynomial.legendre.leggauss(16)


def _weighted_airy_integral(p: float, power: int) -> float:
    """integral over R of exp(rate*s) * Ai(s)**power, rate = power*p.

    Returned as exp(shift) * scaled where the scaled integrand
    exp(rate*s - shift)*Ai^power peaks at O(1); shift = power*p^3/3.
    """
    rate = power * p
    shift = power * p ** 3 / 3.0

    def scaled(s):
        s = np.asarray(s, dtype=np.float64)
        out = np.empty_like(s)
        big = s > 12.0
        if np.any(big):
            la = log_ai(s[big])
            out[big] = np.exp(rate * s[big] - shift + power * la)
        rest = ~big
        if np.any(rest):
            a, _, _, _ = _eval_arrays(s[rest])
            out[rest] = np.exp(rate * s[rest] - shift) * a ** power
        return out

    # right part: smooth, one hump near s = p^2
    s_peak = p * p
    s_hi = max(s_peak, 0.0) + 1.0
    while rate * s_hi - power * (2.0 / 3.0) * s_hi ** 1.5 - shift > -60.0:
        s_hi += 1.0
    coarse, _ = _gk_panel(scaled, -8.0, s_hi)
    tol = 1e-13 * max(1.0, abs(coarse))
    right = _adaptive_gk(scaled, -8.0, s_hi, tol)

    # left tail: s = -z, z = w^{2/3}; phase zeta = 2w/3 advances linearly,
    # so fixed panels of one trig period with GL16 behave like a smooth rule
    period = 3.0 * math.pi / power
    w0 = 8.0 ** 1.5
    total = right
    chunk_panels = 256
    max_nodes = 12_000_000
    nodes_used = 0
    w_lo = w0
    quiet = 0
    while quiet < 2:
        edges = w_lo + period * np.arange(chunk_panels + 1)
        mids = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * period
        wn = mids[:, None] + half * _GL16_N[None, :]
        z = wn ** (2.0 / 3.0)
        a, _, _, _ = _eval_arrays(-z.ravel())
        vals = (np.exp(-rate * z.ravel() - shift) * a ** power
                * (2.0 / 3.0) * wn.ravel() ** (-1.0 / 3.0))
        contrib = float((vals.reshape(-1, 16) @ _GL16_W).sum() * half)
        total += contrib
        nodes_used += wn.size
        if abs(contrib) < 1e-15 * abs(total):
            quiet += 1
        else:
            quiet = 0
        if nodes_used > max_nodes:
            raise QuadratureError(
                f"oscillatory tail not converged after {nodes_used} nodes (p={p})")
        w_lo = edges[-1]

    return math.exp(shift) * total


def airy_laplace(p: float) -> float:
    """integral of exp(p*s)*Ai(s) ds over the real line.

    Converges only for p > 0 (the left tail needs the exponential decay to
    beat the |s|^{-1/4} Airy envelope).  Closed form exp(p^3/3); computed
    here by quadrature precisely so that the identity can serve as an
    end-to-end self test.  Supported for 1e-3 <= p <= 12.
    """
    p = float(p)
    if not (p > 0.0) or not math.isfinite(p):
        raise ValueError(f"airy_laplace requires p > 0, got {p!r}")
    if p < 1e-3 or p > 12.0:
        raise ValueError(f"airy_laplace supported for 1e-3 <= p <= 12, got {p}")
    return _weighted_airy_integral(p, power=1)


def j_integral(p: float) -> float:
    """integral of exp(2*p*s)*Ai(s)^2 ds over the real line, for p > 0.

    The integrand is evaluated with the peak factor exp(2*p^3/3) peeled off,
    so the quadrature runs on an O(1) integrand and the growth is restored
    exactly once at the end.  Supported for 1e-3 <= p <= 10; above that the
    restored value overflows double precision.
    """
    p = float(p)
    if not (p > 0.0) or not math.isfinite(p):
        raise ValueError(f"j_integral requires p > 0, got {p!r}")
    if p < 1e-3 or p > 10.0:
        raise ValueError(f"j_integral supported for 1e-3 <= p <= 10, got {p}")
    return _weighted_airy_integral(p, power=2)
