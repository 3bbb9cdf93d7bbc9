"""Count likelihoods: gamma-count, Poisson and negative binomial.

The gamma-count (GC) law counts the events of a renewal process with
Gamma(alpha, gamma) waiting times observed over ``[0, T]``::

    P(Y = y) = G(y*alpha, gamma*T) - G((y+1)*alpha, gamma*T),   G(0, .) = 1

where ``G`` is the regularized lower incomplete gamma function. ``alpha = 1``
is the Poisson law; ``alpha > 1`` is under-dispersed and ``alpha < 1``
over-dispersed. In regression form ``gamma = alpha * exp(eta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from . import _incgamma

# Stand-in for log(0) inside likelihood sums; keeps Newton line searches finite.
LOG_UNDERFLOW = -1.0e30


@dataclass(frozen=True)
class GcParams:
    """Gamma-count parameters: waiting-time shape, rate and exposure."""

    alpha: float
    gamma: float
    exposure: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "gamma", "exposure"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")

    @classmethod
    def from_eta(cls, alpha: float, eta: float, exposure: float = 1.0) -> "GcParams":
        """Regression parameterization ``gamma = alpha * exp(eta)``."""
        return cls(alpha, alpha * math.exp(eta), exposure)

    @property
    def x(self) -> float:
        return self.gamma * self.exposure


@dataclass(frozen=True)
class CountObservation:
    y: int
    covariates: tuple

    def __post_init__(self):
        if self.y < 0 or int(self.y) != self.y:
            raise ValueError("count must be a non-negative integer")
        if not self.covariates or self.covariates[0] != 1:
            raise ValueError("first covariate entry must be the intercept (1)")


@dataclass(frozen=True)
class DispersionTestResult:
    statistic: float
    p_value_one_sided: float
    fitted_means: np.ndarray

    @property
    def overdispersed(self) -> bool:
        return self.p_value_one_sided < 0.05


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite input")


# ---------------------------------------------------------------------------
# regularized incomplete gamma
# ---------------------------------------------------------------------------


def log_reg_lower_incomplete_gamma(shape, x):
    """Return ``(log P(shape, x), log Q(shape, x))`` elementwise."""
    shape, x = np.broadcast_arrays(np.asarray(shape, dtype=float), np.asarray(x, dtype=float))
    _check_finite(shape, x)
    if np.any(shape < 0) or np.any(x < 0):
        raise ValueError("shape and x must be non-negative")
    lp, lq = _incgamma.log_pq_vec(shape.ravel(), x.ravel())
    return lp.reshape(shape.shape), lq.reshape(shape.shape)


def reg_lower_incomplete_gamma(shape, x):
    """Regularized lower incomplete gamma ``G(shape, x)``; ``G(0, x) = 1``."""
    lp, _ = log_reg_lower_incomplete_gamma(shape, x)
    out = np.exp(lp)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# gamma-count
# ---------------------------------------------------------------------------


def _gc_arrays(y, alpha, x):
    y, alpha, x = np.broadcast_arrays(
        np.asarray(y, dtype=np.int64), np.asarray(alpha, dtype=float), np.asarray(x, dtype=float)
    )
    _check_finite(alpha, x)
    if np.any(y < 0):
        raise ValueError("counts must be non-negative")
    if np.any(alpha <= 0) or np.any(x <= 0):
        raise ValueError("alpha and gamma*T must be positive")
    return y, alpha, x


def gc_logpmf(y, params: GcParams):
    """log P(Y = y) for the gamma-count law; ``-inf`` where the pmf underflows."""
    y, alpha, x = _gc_arrays(y, params.alpha, params.x)
    out = _incgamma.gc_logpmf_vec(y.ravel(), alpha.ravel(), x.ravel()).reshape(y.shape)
    return float(out) if out.ndim == 0 else out


def gc_pmf(y, params: GcParams):
    return np.exp(gc_logpmf(y, params))


def gc_logpmf_deta(y, params: GcParams, eta=None):
    """Derivative of the GC log-pmf with respect to the linear predictor.

    ``params.gamma`` is taken as ``alpha * exp(eta)``; if ``eta`` is given it
    overrides ``params.gamma``. The derivative follows from
    ``dG(s, x)/dx = x**(s-1) exp(-x) / Gamma(s)`` and ``dx/deta = x``.

    Raises
    ------
    FloatingPointError
        If the pmf underflows at this point (the caller must damp its step).
    """
    x = params.x if eta is None else params.alpha * np.exp(eta) * params.exposure
    y, alpha, x = _gc_arrays(y, params.alpha, x)
    out = _incgamma.gc_deta_vec(y.ravel(), alpha.ravel(), x.ravel()).reshape(y.shape)
    if np.any(np.isnan(out)):
        raise FloatingPointError("gamma-count pmf underflows; derivative undefined")
    return float(out) if out.ndim == 0 else out


def gc_support_bound(params: GcParams, tol: float = 1e-12) -> int:
    """Smallest Y* with cumulative mass >= 1 - tol and pmf(Y*) < tol * 1e-2."""
    alpha, x = params.alpha, params.x
    cum = 0.0
    y = 0
    while True:
        p = math.exp(_incgamma.gc_logpmf_scalar(y, alpha, x))
        cum += p
        if cum >= 1.0 - tol and p < tol * 1e-2:
            return y
        y += 1


def gc_mean(params: GcParams, tol: float = 1e-10) -> float:
    """Mean of the GC law, ``sum_{k>=1} G(k*alpha, gamma*T)``.

    Summation stops once a certified bound on the remaining tail falls below
    ``tol``. For ``k*alpha + 1 > x`` the series representation gives
    ``G(a, x) <= x**a e**-x / Gamma(a+1) / (1 - x/(a+1))``, and the ratio of
    consecutive bounds is non-increasing in ``k``, so the tail is dominated by
    a geometric series.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    alpha, x = params.alpha, params.x
    lx = math.log(x)

    def log_bound(a):
        return a * lx - x - math.lgamma(a + 1.0) - math.log1p(-x / (a + 1.0))

    total = 0.0
    k = 1
    while True:
        total += math.exp(_incgamma.log_pq(k * alpha, x)[0])
        a_next = (k + 1) * alpha
        if a_next + 1.0 > 2.0 * x:
            ratio = math.exp(log_bound(a_next + alpha) - log_bound(a_next))
            if ratio < 1.0:
                tail = math.exp(log_bound(a_next)) / (1.0 - ratio)
                if tail < tol:
                    return total
        k += 1


def gc_variance(params: GcParams, tol: float = 1e-12) -> float:
    """Variance from the pmf truncated at the adaptive support bound."""
    ymax = gc_support_bound(params, tol)
    ys = np.arange(ymax + 1)
    p = gc_pmf(ys, params)
    m = np.sum(ys * p)
    return float(np.sum((ys - m) ** 2 * p))


def _renewal_counts(alpha, rates, horizon, rng):
    rates = np.asarray(rates, dtype=float)
    mean_count = float(np.max(rates)) * horizon / alpha
    chunk = int(max(4, math.ceil(mean_count + 4.0 * math.sqrt(mean_count / alpha + 1.0))))
    n = rates.size
    counts = np.zeros(n, dtype=np.int64)
    elapsed = np.zeros(n)
    active = np.arange(n)
    while active.size:
        waits = rng.gamma(alpha, 1.0, size=(active.size, chunk)) / rates[active, None]
        arrivals = elapsed[active, None] + np.cumsum(waits, axis=1)
        counts[active] += np.sum(arrivals <= horizon, axis=1)
        elapsed[active] = arrivals[:, -1]
        active = active[elapsed[active] <= horizon]
    return counts


def gc_sample(params: GcParams, rng: np.random.Generator, size=None):
    """Draw GC counts by simulating the renewal process.

    Gamma waiting times are accumulated until their sum passes the exposure;
    the number of completed events is the count. Draws for ``size`` replicates
    are simulated together in chunks.
    """
    n = 1 if size is None else int(np.prod(size))
    counts = _renewal_counts(params.alpha, np.full(n, params.gamma), params.exposure, rng)
    if size is None:
        return int(counts[0])
    return counts.reshape(size)


def gc_sample_eta(alpha: float, eta, rng: np.random.Generator, exposure: float = 1.0):
    """One GC draw per linear-predictor value, ``gamma_i = alpha * exp(eta_i)``."""
    eta = np.asarray(eta, dtype=float)
    rates = alpha * np.exp(eta.ravel())
    return _renewal_counts(alpha, rates, exposure, rng).reshape(eta.shape)


# ---------------------------------------------------------------------------
# Poisson / negative binomial
# ---------------------------------------------------------------------------


def poisson_logpmf(y, mean):
    y = np.asarray(y)
    mean = np.asarray(mean, dtype=float)
    if np.any(mean <= 0):
        raise ValueError("mean must be positive")
    if np.any(y < 0):
        raise ValueError("counts must be non-negative")
    out = special.xlogy(y, mean) - mean - special.gammaln(y + 1.0)
    return float(out) if np.ndim(out) == 0 else out


def nb_logpmf(y, mean, size):
    """Negative binomial with mean ``mean`` and variance ``mean + mean**2/size``."""
    y = np.asarray(y)
    mean = np.asarray(mean, dtype=float)
    size = np.asarray(size, dtype=float)
    if np.any(mean <= 0) or np.any(size <= 0):
        raise ValueError("mean and size must be positive")
    if np.any(y < 0):
        raise ValueError("counts must be non-negative")
    # log C(y + size - 1, y) through betaln stays accurate for huge sizes
    log_comb = -special.betaln(y + 1.0, size) - np.log(y + size)
    out = log_comb - size * np.log1p(mean / size) + special.xlogy(y, mean / (size + mean))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Dean-Lawless over-dispersion score test
# ---------------------------------------------------------------------------


def poisson_irls(y, X, max_iter: int = 100, tol: float = 1e-10):
    """Maximum-likelihood Poisson GLM (log link) by iteratively reweighted least squares."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("design must be n x p with n = len(y)")
    if y.shape[0] < X.shape[1] + 1:
        raise ValueError("insufficient data for a Poisson fit")
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(max(y.mean(), 1e-8))
    for _ in range(max_iter):
        eta = X @ beta
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        XtW = X.T * mu
        new = np.linalg.solve(XtW @ X, XtW @ z)
        if np.max(np.abs(new - beta)) < tol * (1.0 + np.max(np.abs(beta))):
            beta = new
            break
        beta = new
    return beta, np.exp(X @ beta)


def dean_lawless_test(y, mu_hat) -> DispersionTestResult:
    """Score test of Poisson against mixed-Poisson over-dispersion.

    ``T = sum((y - mu)**2 - y) / sqrt(2 * sum(mu**2))`` with the one-sided
    p-value ``P(Z > T)`` for the alternative of positive mixing variance.
    """
    y = np.asarray(y, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    if y.shape != mu_hat.shape:
        raise ValueError("y and mu_hat must have equal length")
    denom = math.sqrt(2.0 * float(np.sum(mu_hat**2)))
    if denom == 0.0:
        raise ValueError("fitted means are all zero")
    stat = float(np.sum((y - mu_hat) ** 2 - y)) / denom
    return DispersionTestResult(stat, float(stats.norm.sf(stat)), mu_hat)
