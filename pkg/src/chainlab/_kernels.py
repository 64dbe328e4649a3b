"""Compiled inner loops for the stochastic integrators.

Each kernel advances one path over the whole grid given pre-generated noise
arrays.  They are deliberately scalar-state loops: path-level parallelism
happens above, and a 1e7-step loop in pure Python would be ~1000x slower.

Divergence policy: positions are clamped to +-Q_CAP and the path flagged,
never NaN'd (explicit steps can overshoot the cubic's basin).
"""

import numpy as np
from numba import njit

Q_CAP = 10.0
P_CAP = 1e8


@njit(cache=True)
def em_overdamped(x0, t_start, dt, eps, bias, c, dw, k0, q_out):
    """Euler-Maruyama for dq = (t q - q^3 + bias)/eps dt + c dW.

    The path is frozen at x0 for the first k0 steps (used by coupled runs
    whose processes come alive mid-grid).  Returns the truncation flag.
    """
    q = x0
    for k in range(k0 + 1):
        q_out[k] = q
    truncated = False
    for k in range(k0, dw.size):
        t = t_start + k * dt
        q = q + dt * (t * q - q * q * q + bias) / eps + c * dw[k]
        if q > Q_CAP:
            q = Q_CAP
            truncated = True
        elif q < -Q_CAP:
            q = -Q_CAP
            truncated = True
        q_out[k + 1] = q
    return truncated


@njit(cache=True)
def underdamped_nf(x0, v0, t_start, dt, eps, bias, c, decay, cov_h, b_res,
                   epsbeta, dw, z2, k0, q_out, p_out):
    """Frozen-force exact step for the underdamped normal form.

    Over one step the force G = (t q - q^3 + bias)/eps is frozen at the left
    endpoint, making the (q, p) update the exact solution of a linear SDE:

        p' = G + (p - G) decay + eta,   eta = cov_h*dW + b_res*Z
        q' = q + G dt + c dW - eps^beta (p' - p)

    The q-identity is the pathwise integral of the p-equation, so no extra
    noise enters q; (dW, eta) carry the exact joint Gaussian law.
    """
    q = x0
    p = v0
    for k in range(k0 + 1):
        q_out[k] = q
        p_out[k] = p
    truncated = False
    for k in range(k0, dw.size):
        t = t_start + k * dt
        g = (t * q - q * q * q + bias) / eps
        eta = cov_h * dw[k] + b_res * z2[k]
        p_new = g + (p - g) * decay + eta
        q = q + g * dt + c * dw[k] - epsbeta * (p_new - p)
        p = p_new
        if q > Q_CAP:
            q = Q_CAP
            truncated = True
        elif q < -Q_CAP:
            q = -Q_CAP
            truncated = True
        if p > P_CAP:
            p = P_CAP
            truncated = True
        elif p < -P_CAP:
            p = -P_CAP
            truncated = True
        q_out[k + 1] = q
        p_out[k + 1] = p
    return truncated


@njit(cache=True)
def ou_pair(decay, cov_h, b_res, c, epsbeta, dw, z2, q_out, p_out):
    """Exact transition for the forceless pair:

        eps^beta dP = -P dt + c dW,    dQ = P dt,    Q(-T) = P(-T) = 0.

    The Q update telescopes to Q_k = c W_k - eps^beta P_k exactly.
    """
    qq = 0.0
    pp = 0.0
    q_out[0] = 0.0
    p_out[0] = 0.0
    for k in range(dw.size):
        eta = cov_h * dw[k] + b_res * z2[k]
        p_new = pp * decay + eta
        qq = qq + c * dw[k] - epsbeta * (p_new - pp)
        pp = p_new
        q_out[k + 1] = qq
        p_out[k + 1] = pp


@njit(cache=True)
def _pairwise_du(y, breaks, coefs, ca, b):
    # U'(y) from the stored antiderivative of U''; zero at and beyond the
    # cutoff, linear continuation of the quadratic core below zero
    if y >= b:
        return 0.0
    j = 0
    for m in range(1, breaks.size - 1):
        if y >= breaks[m]:
            j = m
        else:
            break
    xi = y - breaks[j]
    acc = coefs[0, j]
    for i in range(1, coefs.shape[0]):
        acc = acc * xi + coefs[i, j]
    return acc - ca


@njit(cache=True)
def underdamped_chain(x0, v0, t_start, dt, eps, c, decay, cov_h, b_res,
                      epsbeta, a_min, breaks, coefs, ca, b_cut, dw, z2,
                      q_out, p_out):
    """Frozen-force exact step for the pulled three-particle chain.

    In slow time, with v = p/eps, the middle particle solves
        dq = v dt,   eps^beta dv = -v dt + (1/eps) F(q, t) dt + (c) dW,
    F(q, t) = -U'(q) + U'(2a(1+t) - q), which is the same splitting as the
    normal form with the chain force in place of the cubic.
    """
    q = x0
    p = v0
    q_out[0] = q
    p_out[0] = p
    truncated = False
    for k in range(dw.size):
        t = t_start + k * dt
        span = 2.0 * a_min * (1.0 + t)
        force = (_pairwise_du(span - q, breaks, coefs, ca, b_cut)
                 - _pairwise_du(q, breaks, coefs, ca, b_cut))
        g = force / eps
        eta = cov_h * dw[k] + b_res * z2[k]
        p_new = g + (p - g) * decay + eta
        q = q + g * dt + c * dw[k] - epsbeta * (p_new - p)
        p = p_new
        if q > span + Q_CAP:
            q = span + Q_CAP
            truncated = True
        elif q < -Q_CAP:
            q = -Q_CAP
            truncated = True
        if p > P_CAP:
            p = P_CAP
            truncated = True
        elif p < -P_CAP:
            p = -P_CAP
            truncated = True
        q_out[k + 1] = q
        p_out[k + 1] = p
    return truncated
