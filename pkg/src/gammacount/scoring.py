"""Predictive scores from posterior draws: WAIC, DIC, CPO / log-score, PIT.

The criteria take per-observation matrices with one row per observation
and one column per posterior draw. Draws come from the grid mixture of
Gaussian approximations: a hyperparameter point is picked by weight and the
linear predictor of each observation is drawn from its Gaussian marginal at
that point. Every criterion here is a sum of per-observation terms, so the
marginal draws are sufficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import _incgamma
from .count_models import LOG_UNDERFLOW
from .inference import FitResult, loglik_terms

PIT_MODES = ("mid", "random")


@dataclass
class ScoreReport:
    waic: float
    dic: float
    log_score: float
    cpo: np.ndarray
    pit: np.ndarray
    mspe: float | None = None
    p_waic: float = float("nan")
    lppd: float = float("nan")
    p_dic: float = float("nan")
    notes: dict = field(default_factory=dict)

    def as_rows(self) -> list:
        rows = [
            ("waic", self.waic),
            ("p_waic", self.p_waic),
            ("lppd", self.lppd),
            ("dic", self.dic),
            ("p_dic", self.p_dic),
            ("log_score", self.log_score),
        ]
        if self.mspe is not None:
            rows.append(("mspe", self.mspe))
        rows.extend(sorted(self.notes.items()))
        return rows


def _as_draws(ll) -> np.ndarray:
    ll = np.atleast_2d(np.asarray(ll, dtype=float))
    if ll.shape[1] < 2:
        raise ValueError("at least two posterior draws are required")
    if np.any(np.isnan(ll)):
        raise ValueError("log-likelihood draws contain NaN")
    return ll


def waic_terms(per_obs_loglik):
    """Return ``(waic, lppd, p_waic)`` from an n x S log-likelihood matrix."""
    ll = _as_draws(per_obs_loglik)
    s = ll.shape[1]
    lppd = float(np.sum(special.logsumexp(ll, axis=1) - math.log(s)))
    p_waic = float(np.sum(np.var(ll, axis=1)))
    return -2.0 * (lppd - p_waic), lppd, p_waic


def waic(per_obs_loglik) -> float:
    """``-2 (lppd - p_waic)`` with the variance penalty summed over observations."""
    return waic_terms(per_obs_loglik)[0]


def dic_terms(per_obs_loglik, loglik_at_posterior_mean):
    """Return ``(dic, p_dic)``; the second argument is a total or per-observation log-likelihood."""
    ll = _as_draws(per_obs_loglik)
    mean_dev = -2.0 * float(np.mean(np.sum(ll, axis=0)))
    dev_hat = -2.0 * float(np.sum(loglik_at_posterior_mean))
    return 2.0 * mean_dev - dev_hat, mean_dev - dev_hat


def dic(per_obs_loglik, loglik_at_posterior_mean) -> float:
    """Deviance information criterion ``2 mean(D) - D(posterior mean)``."""
    return dic_terms(per_obs_loglik, loglik_at_posterior_mean)[0]


def importance_diagnostics(per_obs_loglik) -> dict:
    """Effective sample size of the leave-one-out ratios ``exp(-ll)`` per observation.

    Returns the ESS vector, the largest normalized ratio per observation and
    a boolean mask of unusable observations (infinite ratios).
    """
    ll = _as_draws(per_obs_loglik)
    bad = np.any(~np.isfinite(ll) | (ll <= LOG_UNDERFLOW), axis=1)
    lr = -np.where(bad[:, None], 0.0, ll)
    lw = lr - special.logsumexp(lr, axis=1, keepdims=True)
    w = np.exp(lw)
    ess = 1.0 / np.sum(w * w, axis=1)
    return {"ess": np.where(bad, 0.0, ess), "max_weight": np.where(bad, 1.0, w.max(axis=1)), "unreliable": bad}


def cpo_log_score(per_obs_loglik):
    """Harmonic-mean CPO and ``log_score = -sum log CPO``.

    ``CPO_i = 1 / mean_s exp(-ll_is)``. Observations whose harmonic term is
    infinite (a draw with zero likelihood) get ``CPO_i = NaN`` and are left
    out of the log-score; ``importance_diagnostics`` reports them.
    """
    ll = _as_draws(per_obs_loglik)
    diag = importance_diagnostics(ll)
    s = ll.shape[1]
    log_cpo = math.log(s) - special.logsumexp(-np.where(diag["unreliable"][:, None], 0.0, ll), axis=1)
    log_cpo = np.minimum(log_cpo, 0.0)
    cpo = np.where(diag["unreliable"], np.nan, np.exp(log_cpo))
    return cpo, float(-np.sum(log_cpo[~diag["unreliable"]]))


def pit(per_obs_cdf_below, per_obs_pmf_at, mode: str = "mid", rng: np.random.Generator | None = None):
    """Leave-one-out PIT for counts, ``P(Y_i < y_i | y_-i) + u P(Y_i = y_i | y_-i)``.

    The leave-one-out predictive reweights the draws by ``1 / pmf``. ``u`` is
    0.5 for ``mode="mid"`` and uniform on (0, 1) per observation for
    ``mode="random"`` (``rng`` required). Where a draw has zero pmf the
    reweighting is undefined and the plain posterior predictive is used.
    """
    if mode not in PIT_MODES:
        raise ValueError(f"mode must be one of {PIT_MODES}")
    cdf = np.atleast_2d(np.asarray(per_obs_cdf_below, dtype=float))
    pmf = np.atleast_2d(np.asarray(per_obs_pmf_at, dtype=float))
    if cdf.shape != pmf.shape:
        raise ValueError("cdf and pmf matrices must have the same shape")
    with np.errstate(divide="ignore"):
        lp = np.log(pmf)
    bad = np.any(~np.isfinite(lp), axis=1)
    lw = -np.where(bad[:, None], 0.0, lp)
    w = np.exp(lw - special.logsumexp(lw, axis=1, keepdims=True))
    below = np.sum(w * cdf, axis=1)
    at = np.sum(w * pmf, axis=1)
    if mode == "mid":
        u = 0.5
    else:
        if rng is None:
            raise ValueError("randomized PIT needs an rng")
        u = rng.uniform(size=cdf.shape[0])
    return np.clip(below + u * at, 0.0, 1.0)


def rmse(estimates, truth: float) -> float:
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("no estimates")
    return float(np.sqrt(np.mean((est - truth) ** 2)))


def mspe(field_hat, field_true) -> float:
    a = np.asarray(field_hat, dtype=float)
    b = np.asarray(field_true, dtype=float)
    if a.size == 0 or a.shape != b.shape:
        raise ValueError("field vectors must be non-empty and of equal shape")
    return float(np.mean((a - b) ** 2))


def preference_rate(score_pairs) -> float:
    """Fraction of ``(first, second)`` pairs with ``first`` strictly smaller; ties count against it."""
    pairs = np.atleast_2d(np.asarray(score_pairs, dtype=float))
    if pairs.size == 0:
        raise ValueError("no score pairs")
    return float(np.mean(pairs[:, 0] < pairs[:, 1]))


# ---------------------------------------------------------------------------
# draws from a fitted model
# ---------------------------------------------------------------------------


def posterior_draws(fit_result: FitResult, n_draws: int, rng: np.random.Generator):
    """Grid-point indices (S,) and linear-predictor draws (n, S) from the mixture."""
    if n_draws < 2:
        raise ValueError("at least two draws are required")
    grid = fit_result.grid
    w = grid.weights
    k = rng.choice(len(w), size=n_draws, p=w / w.sum())
    means = np.array([p.eta_mean for p in grid.points])
    sds = np.sqrt(np.maximum(np.array([p.eta_var for p in grid.points]), 0.0))
    z = rng.standard_normal((fit_result.model.n, n_draws))
    return k, means[k].T + sds[k].T * z


def predictive_terms(likelihood: str, y, eta, th: dict):
    """Per-entry ``log P(Y = y | eta)`` and ``P(Y < y | eta)`` for one hyperparameter value."""
    y = np.asarray(y, dtype=np.int64)
    eta = np.asarray(eta, dtype=float)
    shape = eta.shape
    yb = np.broadcast_to(y.reshape(-1, *([1] * (eta.ndim - 1))), shape).ravel()
    e = eta.ravel()
    ll = loglik_terms(likelihood, yb, e, th, curvature=False)[0]
    if likelihood == "poisson":
        cdf = stats.poisson.cdf(yb - 1, np.exp(e))
    elif likelihood == "nb":
        size = math.exp(th["log_size"])
        cdf = stats.nbinom.cdf(yb - 1, size, 1.0 / (1.0 + np.exp(e) / size))
    else:
        la = th["log_alpha"]
        cdf = np.exp(_incgamma.gc_logcdf_below_terms(yb, math.exp(la), la + e))
    return ll.reshape(shape), np.asarray(cdf, dtype=float).reshape(shape)


def draw_matrices(fit_result: FitResult, k, eta):
    """Log-pmf and cdf-below matrices for draws ``(k, eta)`` from ``posterior_draws``."""
    model = fit_result.model
    ll = np.empty_like(eta)
    cdf = np.empty_like(eta)
    for j in np.unique(k):
        cols = np.flatnonzero(k == j)
        th = model.full_theta(fit_result.grid.points[j].theta)
        ll[:, cols], cdf[:, cols] = predictive_terms(model.likelihood, model.y, eta[:, cols], th)
    return ll, cdf


def cavity_loo(fit_result: FitResult, half_width: float = 8.0, max_nodes: int = 4000):
    """Leave-one-out predictive ``P(Y_i = y_i | y_-i)`` and ``P(Y_i < y_i | y_-i)``.

    At each hyperparameter point the leave-one-out density of ``eta_i`` is the
    cavity of its Gaussian marginal: the marginal divided by the Gaussian site
    ``exp(g u - w u^2 / 2)`` that observation ``i`` contributes. The
    predictive pmf and cdf are integrated against the cavity by the
    trapezoid rule on ``+- half_width`` cavity sds, with spacing a quarter of
    the smaller of the cavity sd and the likelihood width in eta. Points are
    mixed with leave-one-out weights ``w_k / CPO_ik``.

    Returns ``(cpo, below, notes)``.
    """
    model = fit_result.model
    grid = fit_result.grid
    y = model.y
    weights = grid.weights
    keep = np.flatnonzero(weights > 1e-12 * weights.max())
    log_cpo_k = np.empty((len(keep), model.n))
    below_k = np.empty((len(keep), model.n))
    n_nodes = 0
    for r, j in enumerate(keep):
        pt = grid.points[j]
        th = model.full_theta(pt.theta)
        eta_hat = pt.eta_mean
        v = np.maximum(pt.eta_var, 1e-300)
        _, g, h = model.loglik_terms(eta_hat, th)
        w = np.maximum(-h, 0.0)
        lam_c = np.maximum(1.0 / v - w, 1e-6 / v)
        m_c = eta_hat - g / lam_c
        s_c = 1.0 / np.sqrt(lam_c)
        width = 1.0 / np.sqrt(np.maximum(w, 1e-12))
        if model.likelihood == "gc":
            width = np.minimum(width, 1.0 / np.sqrt(np.maximum(y, 1) * math.exp(th["log_alpha"])))
        spacing = 0.25 * np.minimum(s_c, width)
        counts = np.clip(np.ceil(2.0 * half_width * s_c / spacing).astype(int) + 1, 65, max_nodes)
        counts += 1 - counts % 2
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        idx = np.repeat(np.arange(model.n), counts)
        pos = np.arange(idx.size) - starts[idx]
        z = -half_width + 2.0 * half_width * pos / (counts[idx] - 1)
        lw = -0.5 * z * z
        lw[pos == 0] -= math.log(2.0)
        lw[pos == counts[idx] - 1] -= math.log(2.0)
        lw -= np.log(np.add.reduceat(np.exp(lw), starts))[idx]
        ll, cdf = predictive_terms(model.likelihood, y[idx], m_c[idx] + s_c[idx] * z, th)
        log_cpo_k[r] = _segment_logsumexp(ll + lw, starts)
        below_k[r] = np.add.reduceat(np.exp(lw) * cdf, starts)
        n_nodes = max(n_nodes, int(counts.max()))
    lwk = np.log(weights[keep] / weights[keep].sum())[:, None]
    # 1 / CPO_i = sum_k w_k / CPO_ik
    log_cpo = -special.logsumexp(lwk - log_cpo_k, axis=0)
    loo_w = np.exp(lwk - log_cpo_k + log_cpo[None, :])
    cpo = np.exp(np.minimum(log_cpo, 0.0))
    below = np.clip(np.sum(loo_w * below_k, axis=0), 0.0, 1.0)
    return cpo, below, {"loo_points": int(len(keep)), "loo_max_nodes": n_nodes}


def _segment_logsumexp(values, starts):
    top = np.maximum.reduceat(values, starts)
    seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(values)]))
    return top + np.log(np.add.reduceat(np.exp(values - top[seg]), starts))


LOO_METHODS = ("cavity", "harmonic")


def score_fit(
    fit_result: FitResult,
    n_draws: int = 1000,
    rng: np.random.Generator | None = None,
    pit_mode: str = "mid",
    field_true=None,
    loo: str = "cavity",
) -> ScoreReport:
    """WAIC, DIC, CPO, log-score and PIT of a fitted model (and MSPE against a known field).

    WAIC and DIC use ``n_draws`` mixture draws. CPO and PIT come from
    ``cavity_loo`` by default; ``loo="harmonic"`` reweights the same draws by
    the inverse likelihood instead. The importance-ratio diagnostics of the
    draws are reported either way. ``field_true`` holds the field at the
    observation locations; the estimate is the posterior mean of the
    projected field.
    """
    if loo not in LOO_METHODS:
        raise ValueError(f"loo must be one of {LOO_METHODS}")
    if pit_mode not in PIT_MODES:
        raise ValueError(f"pit_mode must be one of {PIT_MODES}")
    rng = np.random.default_rng(0) if rng is None else rng
    model = fit_result.model
    k, eta = posterior_draws(fit_result, n_draws, rng)
    ll, cdf = draw_matrices(fit_result, k, eta)
    w, lppd, p_waic = waic_terms(ll)
    eta_bar = fit_result.eta_moments()[0]
    th_mode = model.full_theta(fit_result.grid.modal_point.theta)
    d, p_dic = dic_terms(ll, model.loglik_terms(eta_bar, th_mode, curvature=False)[0])
    diag = importance_diagnostics(ll)
    notes = {
        "loo": loo,
        "n_draws": int(n_draws),
        "harmonic_unreliable": int(np.sum(diag["unreliable"])),
        "harmonic_min_ess": float(np.min(diag["ess"])),
        "harmonic_low_ess": int(np.sum(diag["ess"] < 0.01 * n_draws)),
    }
    if loo == "harmonic":
        cpo, log_score = cpo_log_score(ll)
        pit_values = pit(cdf, np.exp(ll), mode=pit_mode, rng=rng)
    else:
        cpo, below, extra = cavity_loo(fit_result)
        notes.update(extra)
        log_score = float(-np.sum(np.log(cpo)))
        u = 0.5 if pit_mode == "mid" else rng.uniform(size=model.n)
        pit_values = np.clip(below + u * cpo, 0.0, 1.0)
    mspe_value = None
    if field_true is not None:
        mspe_value = mspe(model.A @ fit_result.field_mean, field_true)
    return ScoreReport(w, d, log_score, cpo, pit_values, mspe_value, p_waic, lppd, p_dic, notes)


def pit_histogram(pit_values, bins: int = 10):
    """Counts of PIT values in ``bins`` equal-width bins on [0, 1]."""
    counts, edges = np.histogram(np.asarray(pit_values, dtype=float), bins=bins, range=(0.0, 1.0))
    return edges, counts


def ks_uniform(pit_values):
    """Kolmogorov-Smirnov statistic against U(0, 1) and the 5% critical value."""
    x = np.asarray(pit_values, dtype=float)
    res = stats.kstest(x, "uniform")
    crit = stats.kstwo.ppf(0.95, len(x))
    return float(res.statistic), float(crit)
