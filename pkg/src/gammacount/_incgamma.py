"""Log-space regularized incomplete gamma kernels (numba).

The lower ratio P(a, x) comes from the power series when x < a + 1 and the
upper ratio Q(a, x) from the Legendre continued fraction (modified Lentz)
otherwise; the complementary value is recovered with a stable log1mexp.
Both are returned in log space so that differences of nearby values, as in
the gamma-count pmf, can be formed without cancellation.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

EPS = 1e-16
FPMIN = 1e-300
MAX_ITER = 100_000


@njit(cache=True)
def log1mexp(z):
    """log(1 - exp(z)) for z <= 0."""
    if z > -0.6931471805599453:
        return math.log(-math.expm1(z))
    return math.log1p(-math.exp(z))


@njit(cache=True)
def _log_series(a, x, lx):
    # log P(a, x) via sum_{n>=0} x^n / ((a+1)...(a+n)) / a
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if term < total * EPS:
            break
    return a * lx - math.lgamma(a) + math.log(total)


@njit(cache=True)
def _log_contfrac(a, x, lx):
    # log Q(a, x), modified Lentz evaluation of the continued fraction
    b = x + 1.0 - a
    c = 1.0 / FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < FPMIN:
            d = FPMIN
        c = b + an / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            break
    return a * lx - math.lgamma(a) + math.log(h)


@njit(cache=True)
def log_pq_shifted(a, x):
    """Return (log P(a, x) + x, log Q(a, x) + x).

    The common ``-x`` factor of both tails is left out of the series and the
    continued fraction, so differences and ratios of values at the same x
    stay exact even when x is far beyond 1 / machine epsilon.
    """
    if a == 0.0:
        return x, -np.inf
    if x == 0.0:
        return -np.inf, 0.0
    if x == np.inf:
        return np.inf, -np.inf
    lx = math.log(x)
    if x < a + 1.0:
        lp = _log_series(a, x, lx)
        if lp > x:
            lp = x
        return lp, log1mexp(lp - x) + x if lp < x else -np.inf
    lq = _log_contfrac(a, x, lx)
    if lq > x:
        lq = x
    return log1mexp(lq - x) + x if lq < x else -np.inf, lq


@njit(cache=True)
def log_pq(a, x):
    """Return (log P(a, x), log Q(a, x)); P(0, x) = 1 by convention."""
    if a == 0.0:
        return 0.0, -np.inf
    if x == 0.0:
        return -np.inf, 0.0
    if x == np.inf:
        return 0.0, -np.inf
    lp, lq = log_pq_shifted(a, x)
    return min(lp - x, 0.0), min(lq - x, 0.0)


@njit(cache=True)
def _logdiff(la, lb):
    # log(exp(la) - exp(lb)) for la >= lb
    if la == -np.inf:
        return -np.inf
    if lb >= la:
        return -np.inf
    return la + log1mexp(lb - la)


@njit(cache=True)
def _gc_logpmf_shifted(y, alpha, x):
    # log P(Y = y) + x
    if y == 0:
        return log_pq_shifted(alpha, x)[1]
    lp1, lq1 = log_pq_shifted(y * alpha, x)
    lp2, lq2 = log_pq_shifted((y + 1) * alpha, x)
    # P1 - P2 == Q2 - Q1; use whichever pair has the smaller magnitude
    if lp1 <= lq2:
        return _logdiff(lp1, lp2)
    return _logdiff(lq2, lq1)


@njit(cache=True)
def gc_logpmf_scalar(y, alpha, x):
    """log P(Y = y) for GC with shape alpha and ``x = gamma * T``."""
    if x == 0.0:
        return 0.0 if y == 0 else -np.inf
    return min(_gc_logpmf_shifted(y, alpha, x) - x, 0.0)


@njit(cache=True)
def gc_logpmf_and_deta(y, alpha, x):
    """log-pmf and its derivative with respect to log(x) (= eta)."""
    if x == 0.0:
        return gc_logpmf_scalar(y, alpha, x), np.nan
    r = _gc_logpmf_shifted(y, alpha, x)
    lp = min(r - x, 0.0)
    if r == -np.inf:
        return lp, np.nan
    lx = math.log(x)
    # x * Gamma(s, 1) density at x, divided by the pmf; the exp(-x) factors cancel
    s2 = (y + 1) * alpha
    d = -math.exp(s2 * lx - math.lgamma(s2) - r)
    if y > 0:
        s1 = y * alpha
        d += math.exp(s1 * lx - math.lgamma(s1) - r)
    return lp, d


@njit(cache=True)
def gc_loglik_terms(y, alpha, log_x):
    """Vectorized log-pmf and d/deta over observations; x = exp(log_x)."""
    n = y.shape[0]
    lp = np.empty(n)
    d = np.empty(n)
    for i in range(n):
        lp[i], d[i] = gc_logpmf_and_deta(y[i], alpha, math.exp(log_x[i]))
    return lp, d


@njit(cache=True)
def gc_logcdf_below_terms(y, alpha, log_x):
    """log P(Y < y) = log Q(y * alpha, x) per observation."""
    n = y.shape[0]
    out = np.empty(n)
    for i in range(n):
        if y[i] == 0:
            out[i] = -np.inf
        else:
            out[i] = log_pq(y[i] * alpha, math.exp(log_x[i]))[1]
    return out


@njit(cache=True)
def log_pq_vec(a, x):
    n = a.shape[0]
    lp = np.empty(n)
    lq = np.empty(n)
    for i in range(n):
        lp[i], lq[i] = log_pq(a[i], x[i])
    return lp, lq


@njit(cache=True)
def gc_logpmf_vec(y, alpha, x):
    n = y.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = gc_logpmf_scalar(y[i], alpha[i], x[i])
    return out


@njit(cache=True)
def gc_deta_vec(y, alpha, x):
    n = y.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = gc_logpmf_and_deta(y[i], alpha[i], x[i])[1]
    return out


@njit(cache=True)
def gc_loglik_curvature(y, alpha, log_alpha, eta, rel_step, h_max):
    """Log-pmf, d/deta and the clamped central-difference d2/deta2 per observation.

    The second derivative differences the analytic first derivative at
    ``eta +- rel_step * max(1, |eta|)`` and is capped at ``h_max`` (< 0).
    """
    n = y.shape[0]
    lp = np.empty(n)
    d = np.empty(n)
    h = np.empty(n)
    for i in range(n):
        lp[i], d[i] = gc_logpmf_and_deta(y[i], alpha, math.exp(log_alpha + eta[i]))
        step = rel_step * max(1.0, abs(eta[i]))
        dp = gc_logpmf_and_deta(y[i], alpha, math.exp(log_alpha + eta[i] + step))[1]
        dm = gc_logpmf_and_deta(y[i], alpha, math.exp(log_alpha + eta[i] - step))[1]
        hi = (dp - dm) / (2.0 * step)
        h[i] = hi if hi < h_max else h_max
    return lp, d, h
