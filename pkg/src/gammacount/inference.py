"""Nested Laplace approximation for latent Gaussian count models.

The latent vector is ``psi = (beta, w)`` with ``beta ~ N(0, s2 I)`` and ``w``
the SPDE field weights, ``w ~ N(0, Q(tau, kappa)^{-1})``; the linear predictor
is ``eta = X beta + A w``. For each hyperparameter value ``theta`` the
conditional posterior of ``psi`` is replaced by a Gaussian at its mode, which
gives the Laplace approximation of ``pi(theta | y)``; latent marginals are
mixtures of these Gaussians over a grid in ``theta``.

Two numerically equivalent engines compute the Gaussian approximation:

``latent``
    Newton iterations on ``psi`` with the ``s x s`` posterior precision
    ``P + A' W A`` (sparse or dense Cholesky).
``predictor``
    Newton iterations on ``eta`` with the ``n x n`` prior covariance of the
    predictor, which is cheap to form because the field prior is diagonal in
    the generalized eigenbasis of the finite-element matrices. Preferred when
    ``n`` is smaller than the latent dimension.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy import optimize, special

from . import _incgamma
from ._linalg import DenseCholesky, NotPositiveDefiniteError, cholesky
from .count_models import LOG_UNDERFLOW
from .mesh import Mesh
from .spde_field import FemMatrices, PcPriorSpec, precision_logdet, projector, tau_to_sigma2

log = logging.getLogger(__name__)

LIKELIHOODS = ("gc", "poisson", "nb")
CORRECTIONS = ("none", "cavity")
ENGINES = ("auto", "latent", "predictor")
STRATEGIES = ("grid", "ccd")
LOG_SQRT8 = 0.5 * math.log(8.0)
LOG_VAR_CONST = -math.log(4.0 * math.pi)  # sigma^2 = 1 / (4 pi kappa^2 tau^2)
Z975 = 1.959963984540054

_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(32)
_GH_LOGW = np.log(_GH_W / _GH_W.sum())


class InferenceError(RuntimeError):
    pass


class ConvergenceError(InferenceError):
    def __init__(self, message, last_iterate=None, grad_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class PriorSpec:
    """Priors of the hierarchical model.

    ``log_tau`` and ``log_kappa`` are (mean, variance) of normal priors; when
    ``pc`` is given the penalized-complexity prior on (sigma, range) is used
    instead. ``log_size`` is the normal prior on the negative-binomial log size.
    """

    alpha_gamma: tuple = (0.01, 0.01)
    beta_variance: float = 1000.0
    log_tau: tuple = (math.log(0.02), 10.0)
    log_kappa: tuple = (math.log(14.0), 10.0)
    pc: PcPriorSpec | None = None
    log_size: tuple = (0.0, 10.0)

    def __post_init__(self):
        a, b = self.alpha_gamma
        if not (a > 0 and b > 0 and self.beta_variance > 0):
            raise ValueError("prior shape/rate/variance must be positive")
        if not (self.log_tau[1] > 0 and self.log_kappa[1] > 0 and self.log_size[1] > 0):
            raise ValueError("prior variances must be positive")


def _normal_logpdf(x, mean, var):
    return -0.5 * math.log(2.0 * math.pi * var) - 0.5 * (x - mean) ** 2 / var


def loglik_terms(likelihood: str, y, eta, th: dict, lgy=None, curvature: bool = True):
    """Per-observation log-likelihood with its first and second derivative in eta.

    Full normalizing constants are kept. For the gamma-count law the second
    derivative is a central difference of the analytic first derivative with
    step ``1e-4 max(1, |eta|)``, clamped to at most ``-1e-8``; log-pmf
    underflow maps to ``LOG_UNDERFLOW`` with an undefined (NaN) gradient.
    """
    if lgy is None:
        lgy = special.gammaln(y + 1.0)
    if likelihood == "poisson":
        mu = np.exp(np.minimum(eta, 700.0))
        return y * eta - mu - lgy, y - mu, -mu
    if likelihood == "nb":
        size = math.exp(th["log_size"])
        log_tot = np.logaddexp(math.log(size), eta)
        ll = (
            special.gammaln(y + size) - math.lgamma(size) - lgy
            + size * (math.log(size) - log_tot) + y * (eta - log_tot)
        )
        frac = np.exp(eta - log_tot)  # mu / (size + mu)
        return ll, y - (y + size) * frac, -(y + size) * frac * (1.0 - frac)
    la = th["log_alpha"]
    alpha = math.exp(la)
    if not curvature:
        ll, g = _incgamma.gc_loglik_terms(y, alpha, la + eta)
        return np.where(np.isfinite(ll), ll, LOG_UNDERFLOW), g, None
    ll, g, h = _incgamma.gc_loglik_curvature(y, alpha, la, np.asarray(eta, dtype=float), 1e-4, -1e-8)
    # NaN curvature (underflow) propagates through the NaN gradient check
    return np.where(np.isfinite(ll), ll, LOG_UNDERFLOW), g, h


@dataclass(eq=False)
class LatentModel:
    """Data, design, projector, field operator, likelihood family and priors.

    ``fixed`` pins hyperparameters (keys from ``all_hyper_names``) so they are
    excluded from the grid, e.g. ``{"log_alpha": 0.0}`` for a GC fit with
    alpha = 1.
    """

    y: np.ndarray
    X: np.ndarray
    A: sp.csr_matrix
    fem: FemMatrices
    likelihood: str = "gc"
    priors: PriorSpec = field(default_factory=PriorSpec)
    fixed: dict = field(default_factory=dict)
    mesh: Mesh | None = None
    locations: np.ndarray | None = None
    covariate_names: tuple = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.A = sp.csr_matrix(self.A)
        n = len(self.y)
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if np.any(self.y < 0):
            raise ValueError("counts must be non-negative")
        if self.X.shape[0] != n or self.A.shape[0] != n:
            raise ValueError("design, projector and response lengths differ")
        if self.A.shape[1] != self.fem.n:
            raise ValueError("projector columns must match the number of mesh vertices")
        if not np.allclose(self.X[:, 0], 1.0):
            raise ValueError("first design column must be the intercept")
        unknown = set(self.fixed) - set(self.all_hyper_names)
        if unknown:
            raise ValueError(f"cannot fix unknown hyperparameters {sorted(unknown)}")
        if not self.covariate_names:
            self.covariate_names = ("intercept",) + tuple(f"x{j}" for j in range(1, self.p))
        if len(self.covariate_names) != self.p:
            raise ValueError("one covariate name per design column is required")
        self._Atilde = sp.hstack([sp.csr_matrix(self.X), self.A]).tocsr()
        self._AtildeT = self._Atilde.T.tocsr()
        self._lgy = special.gammaln(self.y + 1.0)
        self._bf = None

    @classmethod
    def build(cls, y, X, locations, mesh: Mesh, likelihood="gc", priors=None, fixed=None, **kw):
        from .spde_field import fem_matrices

        locations = np.asarray(locations, dtype=float)
        return cls(
            y=y,
            X=X,
            A=projector(mesh, locations),
            fem=fem_matrices(mesh),
            likelihood=likelihood,
            priors=priors or PriorSpec(),
            fixed=dict(fixed or {}),
            mesh=mesh,
            locations=locations,
            **kw,
        )

    # -- dimensions and names ------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.fem.n

    @property
    def s(self) -> int:
        return self.p + self.m

    @property
    def all_hyper_names(self) -> tuple:
        lik = {"gc": ("log_alpha",), "nb": ("log_size",), "poisson": ()}[self.likelihood]
        return lik + ("log_tau", "log_kappa")

    @property
    def hyper_names(self) -> tuple:
        return tuple(k for k in self.all_hyper_names if k not in self.fixed)

    def full_theta(self, theta) -> dict:
        if isinstance(theta, dict):
            return theta
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (len(self.hyper_names),):
            raise ValueError(f"expected {len(self.hyper_names)} hyperparameters, got {theta.shape}")
        out = dict(self.fixed)
        out.update(zip(self.hyper_names, theta.tolist()))
        return out

    def default_theta(self) -> np.ndarray:
        pr = self.priors
        start = {"log_alpha": 0.0, "log_size": 1.0, "log_tau": pr.log_tau[0], "log_kappa": pr.log_kappa[0]}
        if pr.pc is not None:
            # centre at the tail thresholds: sigma = sigma0, range = 2 r0
            lk = LOG_SQRT8 - math.log(2.0 * pr.pc.r0)
            start["log_kappa"] = lk
            start["log_tau"] = 0.5 * LOG_VAR_CONST - lk - math.log(pr.pc.sigma0)
        return np.array([start[k] for k in self.hyper_names])

    def with_likelihood(self, likelihood: str, fixed=None) -> "LatentModel":
        out = replace(self, likelihood=likelihood, fixed=dict(fixed or {}))
        out._bf = self._bf
        return out

    # -- pieces of the joint density -------------------------------------------

    def log_hyper_prior(self, th: dict) -> float:
        """Log prior density of the free hyperparameters on the log scale (Jacobians included)."""
        pr = self.priors
        free = set(self.hyper_names)
        out = 0.0
        if "log_alpha" in free:
            a, b = pr.alpha_gamma
            la = th["log_alpha"]
            out += a * math.log(b) - math.lgamma(a) + a * la - b * math.exp(la)
        if "log_size" in free:
            out += _normal_logpdf(th["log_size"], *pr.log_size)
        if pr.pc is None:
            if "log_tau" in free:
                out += _normal_logpdf(th["log_tau"], *pr.log_tau)
            if "log_kappa" in free:
                out += _normal_logpdf(th["log_kappa"], *pr.log_kappa)
        else:
            log_sigma = 0.5 * LOG_VAR_CONST - th["log_kappa"] - th["log_tau"]
            log_range = LOG_SQRT8 - th["log_kappa"]
            ls, lr = pr.pc.lambda_sigma, pr.pc.lambda_range
            sigma, rng_ = math.exp(log_sigma), math.exp(log_range)
            # (log tau, log kappa) -> (log sigma, log range) has unit Jacobian
            if free >= {"log_tau", "log_kappa"}:
                out += math.log(ls) - ls * sigma + log_sigma + math.log(lr) - lr / rng_ - log_range
            elif "log_tau" in free:
                out += math.log(ls) - ls * sigma + log_sigma
            elif "log_kappa" in free:
                out += math.log(lr) - lr / rng_ - log_range
        return out

    def prior_precision(self, th: dict):
        tau, kappa = math.exp(th["log_tau"]), math.exp(th["log_kappa"])
        k2 = kappa * kappa
        q = (tau * tau) * (k2 * k2 * self.fem.c_matrix + 2.0 * k2 * self.fem.g + self.fem.g_cinv_g)
        pb = sp.identity(self.p, format="csc") / self.priors.beta_variance
        return sp.block_diag([pb, q], format="csc")

    def prior_logdet(self, th: dict) -> float:
        tau, kappa = math.exp(th["log_tau"]), math.exp(th["log_kappa"])
        return -self.p * math.log(self.priors.beta_variance) + precision_logdet(self.fem, kappa, tau)

    def field_basis(self):
        """``(lam, V, A V)``: spectral pairs of the FEM operator and their projection to the data."""
        lam, v = self.fem.spectral
        if self._bf is None:
            self._bf = np.asarray(self.A @ v)
        return lam, v, self._bf

    def eta(self, psi):
        return self._Atilde @ psi

    def loglik_terms(self, eta, th: dict, curvature: bool = True):
        return loglik_terms(self.likelihood, self.y, eta, th, self._lgy, curvature)

    def loglik(self, eta, th: dict) -> float:
        return float(np.sum(self.loglik_terms(eta, th, curvature=False)[0]))

    def choose_engine(self, engine: str = "auto") -> str:
        if engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}")
        if engine != "auto":
            return engine
        return "predictor" if (self.n < self.s and self.m <= 3000 and self.n <= 2000) else "latent"


# ---------------------------------------------------------------------------
# Gaussian approximation at fixed theta
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GaussianApprox:
    """Gaussian approximation ``N(mode, precision^{-1})`` of ``pi(psi | y, theta)``.

    ``log_marginal`` is the Laplace estimate of ``log p(y | theta)`` with all
    normalizing constants, i.e.
    ``log pi(y | psi*) + log pi(psi* | theta) - log pi_G(psi* | y, theta)``.
    """

    model: LatentModel
    theta: dict
    mode: np.ndarray
    eta: np.ndarray
    grad: np.ndarray  # d loglik / d eta at the mode
    curvature: np.ndarray  # d2 loglik / d eta2 at the mode (negative)
    loglik: float
    log_marginal: float
    iterations: int
    grad_norm: float

    def precision(self):
        """Posterior precision ``P + A' W A`` at the mode (sparse)."""
        m = self.model
        P = m.prior_precision(self.theta)
        H = m._AtildeT @ sp.diags(-self.curvature) @ m._Atilde
        return (P + 0.5 * (H + H.T)).tocsc()

    def eta_variance(self) -> np.ndarray:
        raise NotImplementedError

    def row_moments(self, rows):
        """Mean and variance of ``rows @ psi`` under the approximation."""
        raise NotImplementedError

    def latent_variance(self, indices=None) -> np.ndarray:
        idx = np.arange(self.model.s) if indices is None else np.asarray(indices, dtype=int)
        rows = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), self.model.s))
        return self.row_moments(rows)[1]

    @property
    def warm_start(self):
        return self.mode


@dataclass(eq=False)
class _LatentApprox(GaussianApprox):
    factor: object = None

    def eta_variance(self):
        return self.row_moments(self.model._Atilde)[1]

    def row_moments(self, rows):
        rows = sp.csr_matrix(rows)
        li = self.factor.solve_L(rows.T.toarray())
        return rows @ self.mode, np.einsum("ij,ij->j", li, li)


@dataclass(eq=False)
class _PredictorApprox(GaussianApprox):
    state: np.ndarray = None  # (beta, f) with f = Sigma_f a the field at the observations
    sw: np.ndarray = None  # sqrt(W)
    factor: DenseCholesky = None  # Cholesky of B = I + sW Sigma_f sW
    sigma_f: np.ndarray = None
    d: np.ndarray = None  # spectral prior variances
    s_factor: DenseCholesky = None  # Cholesky of S = I / s2 + X' T X, T = sW B^{-1} sW
    lx: np.ndarray = None  # L^{-1} sW X

    @property
    def warm_start(self):
        return self.state

    def _moments(self, rb, cross, prior_var):
        # u = rb beta + rho w with Cov(rho w, f) = cross (r x n) and prior Var(rho w) = prior_var:
        # Var(u | y) = Var(rho w | beta, y) + e S^{-1} e',  e = rb - cross T X
        v = self.factor.solve_L(self.sw[:, None] * cross.T)
        e = rb - v.T @ self.lx
        es = self.s_factor.solve_L(e.T)
        return prior_var - np.einsum("ij,ij->j", v, v) + np.einsum("ij,ij->j", es, es)

    def eta_variance(self):
        return self._moments(self.model.X, self.sigma_f, np.diag(self.sigma_f).copy())

    def row_moments(self, rows):
        m = self.model
        rows = sp.csr_matrix(rows)
        _, basis, bf = m.field_basis()
        rb = rows[:, : m.p].toarray()
        rf = np.asarray(rows[:, m.p :] @ basis)  # field part in spectral coordinates
        cross = (rf * self.d) @ bf.T
        prior_var = (rf * rf) @ self.d
        return rows @ self.mode, self._moments(rb, cross, prior_var)


def _line_search(objective, f):
    """Halve the step until the objective does not decrease; ``objective(step)``."""
    step = 1.0
    while step >= 1e-10:
        f_new, extra = objective(step)
        if np.isfinite(f_new) and f_new >= f - 1e-12 * abs(f):
            return step, f_new, extra
        step *= 0.5
    return None, f, None


def _latent_engine(model, th, start, gtol, ftol, max_iter):
    P = model.prior_precision(th)
    psi = np.zeros(model.s)
    if start is not None and np.shape(start) == (model.s,):
        psi = np.array(start, dtype=float)

    def objective(x):
        ll = model.loglik(model.eta(x), th)
        return ll - 0.5 * float(x @ (P @ x)), ll

    f, ll = objective(psi)
    rel_change = np.inf
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        _, g, h = model.loglik_terms(model.eta(psi), th)
        if not np.all(np.isfinite(g)):
            raise ConvergenceError("likelihood gradient undefined at iterate", psi, np.inf)
        grad = model._AtildeT @ g - P @ psi
        grad_norm = float(np.max(np.abs(grad)))
        H = (P + model._AtildeT @ sp.diags(-h) @ model._Atilde).tocsc()
        try:
            factor = cholesky(H)
        except NotPositiveDefiniteError as exc:
            raise ConvergenceError(f"posterior precision not PD: {exc}", psi, grad_norm) from exc
        if grad_norm < gtol and rel_change < ftol:
            eta = model.eta(psi)
            lm = ll + 0.5 * model.prior_logdet(th) - 0.5 * float(psi @ (P @ psi)) - 0.5 * factor.logdet()
            return _LatentApprox(model, th, psi, eta, g, h, ll, lm, it, grad_norm, factor=factor)
        delta = factor.solve(grad)
        step, f_new, ll_new = _line_search(lambda t: objective(psi + t * delta), f)
        if step is None:
            raise ConvergenceError("line search failed", psi, grad_norm)
        rel_change = abs(f_new - f) / max(1.0, abs(f))
        psi = psi + step * delta
        f, ll = f_new, ll_new
    raise ConvergenceError(f"no convergence after {max_iter} Newton iterations", psi, grad_norm)


def _predictor_engine(model, th, start, gtol, ftol, max_iter):
    # Newton on (beta, f) with f = Sigma_f a the field at the observations; the
    # field block is handled in predictor space and beta by a p x p Schur
    # complement, which keeps the large beta prior variance out of the factor.
    _, basis, bf = model.field_basis()
    tau, kappa = math.exp(th["log_tau"]), math.exp(th["log_kappa"])
    d = model.fem.field_variances(kappa, tau)
    pv = model.priors.beta_variance
    X = model.X
    n, p = model.n, model.p
    sigma = (bf * d) @ bf.T
    beta = np.zeros(p)
    a = np.zeros(n)
    if start is not None and np.shape(start) == (p + n,):
        # keep the previous predictor; a solves Sigma_f a = f under the new theta
        beta = np.array(start[:p], dtype=float)
        jitter = 1e-10 * float(np.trace(sigma)) / n
        try:
            a = DenseCholesky(sigma + jitter * np.eye(n)).solve(np.asarray(start[p:], dtype=float))
        except NotPositiveDefiniteError:
            a = np.zeros(n)
    f_val = sigma @ a

    def objective(beta_, a_, f_):
        ll = model.loglik(X @ beta_ + f_, th)
        return ll - 0.5 * float(beta_ @ beta_) / pv - 0.5 * float(a_ @ f_), ll

    obj, ll = objective(beta, a, f_val)
    rel_change = np.inf
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        eta = X @ beta + f_val
        _, g, h = model.loglik_terms(eta, th)
        if not np.all(np.isfinite(g)):
            raise ConvergenceError("likelihood gradient undefined at iterate", np.r_[beta, a], np.inf)
        g_beta = X.T @ g - beta / pv
        g_f = g - a
        grad_norm = float(max(np.max(np.abs(g_beta)), np.max(np.abs(model.A.T @ g_f))))
        sw = np.sqrt(-h)
        try:
            factor = DenseCholesky(np.eye(n) + sw[:, None] * sigma * sw[None, :])
            lx = factor.solve_L(sw[:, None] * X)
            s_factor = DenseCholesky(np.eye(p) / pv + lx.T @ lx)
        except NotPositiveDefiniteError as exc:
            raise ConvergenceError(f"posterior precision not PD: {exc}", np.r_[beta, a], grad_norm) from exc

        def t_apply(v):
            return sw * factor.solve(sw * v)

        if grad_norm < gtol and rel_change < ftol:
            mode = np.concatenate([beta, basis @ (d * (bf.T @ a))])
            lm = ll - 0.5 * float(beta @ beta) / pv - 0.5 * float(a @ f_val)
            lm -= 0.5 * (factor.logdet() + s_factor.logdet() + p * math.log(pv))
            return _PredictorApprox(
                model, th, mode, eta, g, h, ll, lm, it, grad_norm,
                state=np.r_[beta, f_val], sw=sw, factor=factor, sigma_f=sigma, d=d, s_factor=s_factor, lx=lx,
            )
        w = -h
        q = g_f - t_apply(sigma @ g_f)  # Sigma_f^{-1} M^{-1} g_f
        d_beta = s_factor.solve(g_beta - X.T @ (w * (sigma @ q)))
        r = g_f - w * (X @ d_beta)
        d_a = r - t_apply(sigma @ r)
        d_f = sigma @ d_a
        step, obj_new, ll_new = _line_search(
            lambda t: objective(beta + t * d_beta, a + t * d_a, f_val + t * d_f), obj
        )
        if step is None:
            raise ConvergenceError("line search failed", np.r_[beta, a], grad_norm)
        rel_change = abs(obj_new - obj) / max(1.0, abs(obj))
        beta = beta + step * d_beta
        a = a + step * d_a
        f_val = f_val + step * d_f
        obj, ll = obj_new, ll_new
    raise ConvergenceError(f"no convergence after {max_iter} Newton iterations", np.r_[beta, a], grad_norm)


def gaussian_approx(
    model: LatentModel,
    theta,
    start=None,
    gtol: float = 1e-6,
    ftol: float = 1e-9,
    max_iter: int = 100,
    engine: str = "auto",
) -> GaussianApprox:
    """Damped Newton search for the mode of ``log pi(y | psi) + log pi(psi | theta)``.

    Every accepted step increases the objective (step halving). Converges when
    ``max |grad_psi| < gtol`` and the relative objective change is below
    ``ftol``. ``start`` is a warm start from a previous approximation of the
    same engine (``GaussianApprox.warm_start``).

    Raises
    ------
    ConvergenceError
        After ``max_iter`` iterations or when no ascent step exists; carries
        the last iterate and gradient norm.
    """
    th = model.full_theta(theta)
    run = _predictor_engine if model.choose_engine(engine) == "predictor" else _latent_engine
    return run(model, th, start, gtol, ftol, max_iter)


def cavity_correction(approx: GaussianApprox) -> float:
    """Sum over observations of the one-site correction to the Laplace evidence.

    For each observation the Gaussian approximation is split into a cavity
    and the quadratic expansion ``t_i`` of its log-pmf at the mode. The
    correction ``log E_c[p(y_i | eta)] - log E_c[t_i(eta)]`` equals
    ``log E_q[p(y_i | eta) / t_i(eta)]`` under the Gaussian marginal ``q`` of
    ``eta_i``, which is what is integrated here (32-point Gauss-Hermite). The
    integrand is close to 1 near the mode for near-quadratic log-pmfs, so the
    rule stays accurate when the likelihood is much sharper than the cavity.
    The term vanishes for quadratic log-pmfs and is strongly negative when the
    pmf is box-shaped in eta (near-deterministic counts), where the curvature
    at the mode misses the narrow support.
    """
    model = approx.model
    sd = np.sqrt(np.maximum(approx.eta_variance(), 0.0))
    m, g, h = approx.eta, approx.grad, approx.curvature
    ll_m = model.loglik_terms(m, approx.theta, curvature=False)[0]
    k = len(_GH_X)
    u = sd[:, None] * _GH_X[None, :]
    ll_pts = loglik_terms(
        model.likelihood, np.repeat(model.y, k), (m[:, None] + u).ravel(), approx.theta,
        np.repeat(model._lgy, k), curvature=False,
    )[0].reshape(-1, k)
    ll_quad = ll_m[:, None] + g[:, None] * u + 0.5 * h[:, None] * u * u
    return float(np.sum(special.logsumexp(ll_pts - ll_quad + _GH_LOGW[None, :], axis=1)))


def log_hyper_posterior(model: LatentModel, theta, start=None, correction: str = "none", engine: str = "auto"):
    """Laplace approximation of ``log pi(theta | y)`` up to ``-log p(y)``.

    Equals ``log pi(y | psi*) + log pi(psi* | theta) + log pi(theta) - log pi_G(psi* | y, theta)``
    with all normalizing constants kept, so subtracting the hyperprior gives
    the Laplace estimate of the marginal likelihood ``log p(y | theta)``.
    ``correction="cavity"`` adds ``cavity_correction``. Returns ``(value, approx)``.
    """
    if correction not in CORRECTIONS:
        raise ValueError(f"correction must be one of {CORRECTIONS}")
    th = model.full_theta(theta)
    ga = gaussian_approx(model, th, start=start, engine=engine)
    val = ga.log_marginal + model.log_hyper_prior(th)
    if correction == "cavity":
        val += cavity_correction(ga)
    return val, ga


# ---------------------------------------------------------------------------
# hyperparameter grid
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class HyperPoint:
    theta: np.ndarray
    log_posterior: float
    weight: float = 0.0
    latent_mode: np.ndarray | None = field(default=None, repr=False)
    eta_mean: np.ndarray | None = field(default=None, repr=False)
    eta_var: np.ndarray | None = field(default=None, repr=False)
    warm_start: np.ndarray | None = field(default=None, repr=False)
    z: tuple = ()


@dataclass(eq=False)
class HyperGrid:
    names: tuple
    points: list
    mode: np.ndarray
    hessian: np.ndarray  # negative Hessian of log pi(theta|y) at the mode
    n_evaluations: int = 0
    correction: str = "cavity"
    engine: str = "auto"
    n_mode_evaluations: int = 0

    def __len__(self):
        return len(self.points)

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.points])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([p.theta for p in self.points]).reshape(len(self.points), len(self.names))

    @property
    def modal_point(self) -> HyperPoint:
        return max(self.points, key=lambda p: p.weight)


class _Evaluator:
    """Log hyper-posterior with a warm start from the nearest evaluated theta."""

    def __init__(self, model, correction, engine):
        self.model = model
        self.correction = correction
        self.engine = engine
        self.thetas = []
        self.starts = []
        self.count = 0

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        start = None
        if self.thetas:
            dist = np.linalg.norm(np.asarray(self.thetas) - theta, axis=1)
            start = self.starts[int(np.argmin(dist))]
        self.count += 1
        try:
            val, ga = log_hyper_posterior(self.model, theta, start, self.correction, self.engine)
        except ConvergenceError:
            if start is None:
                raise
            val, ga = log_hyper_posterior(self.model, theta, None, self.correction, self.engine)
        if not np.isfinite(val):
            raise ConvergenceError("non-finite log posterior", theta)
        self.thetas.append(theta.copy())
        self.starts.append(ga.warm_start)
        return val, ga

    def point(self, theta, z=()):
        val, ga = self(theta)
        return HyperPoint(
            np.asarray(theta, dtype=float).copy(), val, 0.0, ga.mode, ga.eta, ga.eta_variance(), ga.warm_start, z
        )


def _fd_hessian(f, x0, f0, step):
    d = len(x0)
    H = np.zeros((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        H[i, i] = (f(x0 + e) - 2.0 * f0 + f(x0 - e)) / step**2
    for i in range(d):
        for j in range(i + 1, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = step
            ej[j] = step
            val = (f(x0 + ei + ej) - f(x0 + ei - ej) - f(x0 - ei + ej) + f(x0 - ei - ej)) / (4.0 * step**2)
            H[i, j] = H[j, i] = val
    return H


def _ccd_design(d: int, f0: float):
    """CCD points in standardized coordinates and their log volume terms.

    With ``N`` points, all non-central ones on the sphere of radius
    ``r = f0 sqrt(d)``, the terms solve ``w0 phi(0) + (N-1) w phi(r) = 1`` and
    ``(N-1) w phi(r) r^2 = d`` for the standard normal density ``phi``.
    """
    corners = f0 * np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
    axial = f0 * math.sqrt(d) * np.vstack([np.eye(d), -np.eye(d)])
    z = np.vstack([np.zeros(d), corners, axial])
    n_out = len(z) - 1
    log_phi0 = -0.5 * d * math.log(2.0 * math.pi)
    log_vol = np.full(len(z), -math.log(f0 * f0 * n_out) - log_phi0 + 0.5 * d * f0 * f0)
    log_vol[0] = math.log1p(-1.0 / (f0 * f0)) - log_phi0
    return z, log_vol


def explore_hyper_grid(
    model: LatentModel,
    init=None,
    step: float = 0.75,
    drop: float = 6.0,
    correction: str = "cavity",
    engine: str = "auto",
    fd_step: float = 0.05,
    max_points: int = 5000,
    xatol: float = 1e-3,
    fatol: float = 1e-4,
    z_max: float = 5.0,
    strategy: str = "grid",
    ccd_f0: float = 1.1,
) -> HyperGrid:
    """Mode search on ``log pi(theta|y)`` and a regular grid around it.

    Nelder-Mead locates the mode; the grid lives in the eigenbasis of the
    negative Hessian there, ``theta = mode + V diag(lambda^{-1/2}) z`` with
    ``z`` on a lattice of spacing ``step``. Starting from ``z = 0`` the lattice
    is grown through neighbours while the log-density stays within ``drop``
    of the best value found, and never beyond ``z_max`` standard deviations
    along any axis (this bounds the cost on flat ridges of the posterior).
    Weights are proportional to the density.

    ``strategy="ccd"`` replaces the lattice by a central composite design:
    the centre, the ``2**d`` factorial corners ``f0 * (+-1, ..., +-1)`` and
    the ``2 d`` axial points ``+- f0 sqrt(d) e_i``. Each weight is the density
    times a volume term chosen so that the design integrates the mass and the
    second moment of a standard Gaussian exactly.
    """
    if step <= 0 or drop <= 0 or z_max <= 0:
        raise ValueError("grid step and drop must be positive")
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    if ccd_f0 <= 1.0:
        raise ValueError("ccd_f0 must exceed 1")
    ev = _Evaluator(model, correction, engine)
    names = model.hyper_names
    d = len(names)
    if d == 0:
        pt = ev.point(np.zeros(0))
        pt.weight = 1.0
        return HyperGrid(names, [pt], np.zeros(0), np.zeros((0, 0)), ev.count, correction, engine)

    x0 = model.default_theta() if init is None else np.asarray(init, dtype=float)

    def f(x):
        try:
            return ev(x)[0]
        except ConvergenceError:
            return -np.inf

    simplex = np.vstack([x0, x0 + 0.5 * np.eye(d)])
    res = optimize.minimize(
        lambda x: -f(x), x0, method="Nelder-Mead",
        options={"xatol": xatol, "fatol": fatol, "maxfev": 400 * d, "initial_simplex": simplex},
    )
    if not np.isfinite(res.fun):
        raise InferenceError(f"hyperparameter mode search failed: {res.message}")
    mode = np.asarray(res.x, dtype=float)
    n_mode = ev.count
    centre = ev.point(mode, (0,) * d)

    H = -_fd_hessian(f, mode, centre.log_posterior, fd_step)
    if not np.all(np.isfinite(H)):
        raise InferenceError("non-finite curvature at the hyperparameter mode")
    H = 0.5 * (H + H.T)
    lam, V = np.linalg.eigh(H)
    if np.any(lam <= 0):
        log.warning("hyperparameter Hessian not positive definite; flooring eigenvalues")
        lam = np.maximum(np.abs(lam), 1e-2)
    scale = V / np.sqrt(lam)

    if strategy == "ccd":
        z, log_vol = _ccd_design(d, ccd_f0)
        pts, lv = [centre], [log_vol[0]]
        for zk, vk in zip(z[1:], log_vol[1:]):
            try:
                pts.append(ev.point(mode + scale @ zk, tuple(float(v) for v in zk)))
            except ConvergenceError:
                continue
            lv.append(vk)
        lp = np.array([p.log_posterior for p in pts]) + np.array(lv)
        w = np.exp(lp - lp.max())
        w /= w.sum()
        for p, wi in zip(pts, w):
            p.weight = float(wi)
        return HyperGrid(names, pts, mode, H, ev.count, correction, engine, n_mode_evaluations=n_mode)

    points = {centre.z: centre}
    frontier = [centre.z]
    visited = {centre.z}
    best = centre.log_posterior
    while frontier and len(points) < max_points:
        nxt = []
        for z in frontier:
            if best - points[z].log_posterior >= drop:
                continue
            for i in range(d):
                for sgn in (-1, 1):
                    zn = list(z)
                    zn[i] += sgn
                    zn = tuple(zn)
                    if zn in visited or step * abs(zn[i]) > z_max:
                        continue
                    visited.add(zn)
                    theta = mode + scale @ (step * np.asarray(zn, dtype=float))
                    try:
                        pt = ev.point(theta, zn)
                    except ConvergenceError:
                        continue
                    if best - pt.log_posterior < drop:
                        points[zn] = pt
                        nxt.append(zn)
                        best = max(best, pt.log_posterior)
        frontier = nxt
    pts = sorted((p for p in points.values() if best - p.log_posterior < drop), key=lambda p: p.z)
    lp = np.array([p.log_posterior for p in pts])
    w = np.exp(lp - lp.max())
    w /= w.sum()
    for p, wi in zip(pts, w):
        p.weight = float(wi)
    return HyperGrid(names, pts, mode, H, ev.count, correction, engine, n_mode_evaluations=n_mode)


# ---------------------------------------------------------------------------
# marginals, hyperparameter summaries and prediction
# ---------------------------------------------------------------------------


def mixture_moments(weights, means, variances):
    """Moments of a Gaussian mixture: mean = sum w mu, var = sum w (s2 + mu^2) - mean^2."""
    w = np.asarray(weights, dtype=float)
    mu = np.asarray(means, dtype=float)
    var = np.asarray(variances, dtype=float)
    mean = np.tensordot(w, mu, axes=1)
    second = np.tensordot(w, var + mu**2, axes=1)
    return mean, np.sqrt(np.maximum(second - mean**2, 0.0))


def point_approx(model: LatentModel, grid: HyperGrid, point: HyperPoint) -> GaussianApprox:
    """Rebuild the Gaussian approximation at a grid point (warm-started, one or two iterations)."""
    return gaussian_approx(model, point.theta, start=point.warm_start, engine=grid.engine)


def row_moments(model: LatentModel, grid: HyperGrid, rows):
    """Per-grid-point mean and variance of ``rows @ psi``; arrays of shape (K, r)."""
    rows = sp.csr_matrix(rows)
    K = len(grid.points)
    means = np.empty((K, rows.shape[0]))
    variances = np.empty((K, rows.shape[0]))
    for k, p in enumerate(grid.points):
        means[k], variances[k] = point_approx(model, grid, p).row_moments(rows)
    return means, variances


def latent_marginals(model: LatentModel, grid: HyperGrid, indices: Sequence[int] | None = None):
    """Mixture mean and sd of latent coordinates (all of them if ``indices`` is None)."""
    if not grid.points:
        raise InferenceError("empty hyperparameter grid")
    idx = np.arange(model.s) if indices is None else np.asarray(indices, dtype=int)
    rows = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), model.s))
    means, variances = row_moments(model, grid, rows)
    return mixture_moments(grid.weights, means, variances)


def hyper_transforms(model: LatentModel, thetas) -> dict:
    """Interpretable hyperparameters for each row of ``thetas``."""
    thetas = np.atleast_2d(thetas)
    cols = {}
    for row in thetas:
        th = model.full_theta(row)
        tau, kappa = math.exp(th["log_tau"]), math.exp(th["log_kappa"])
        vals = {"tau": tau, "kappa": kappa, "range": math.sqrt(8.0) / kappa, "sigma2": tau_to_sigma2(tau, kappa)}
        vals["sigma"] = math.sqrt(vals["sigma2"])
        if "log_alpha" in th:
            vals["alpha"] = math.exp(th["log_alpha"])
        if "log_size" in th:
            vals["size"] = math.exp(th["log_size"])
        for k, v in vals.items():
            cols.setdefault(k, []).append(v)
    return {k: np.array(v) for k, v in cols.items()}


def weighted_quantile(values, weights, q):
    """Quantile of a discrete weighted sample, interpolating mid-point cumulative weights."""
    order = np.argsort(values)
    v = np.asarray(values, dtype=float)[order]
    w = np.asarray(weights, dtype=float)[order]
    cdf = (np.cumsum(w) - 0.5 * w) / np.sum(w)
    return float(np.interp(q, cdf, v))


@dataclass
class ParameterSummary:
    name: str
    mean: float
    sd: float
    q025: float
    q975: float


@dataclass(eq=False)
class FitResult:
    model: LatentModel
    grid: HyperGrid
    latent_mean: np.ndarray
    latent_sd: np.ndarray | None = None
    scores: object = None
    predictions: dict | None = None

    @property
    def hyper_grid(self) -> list:
        return self.grid.points

    @property
    def beta_mean(self) -> np.ndarray:
        return self.latent_mean[: self.model.p]

    @property
    def field_mean(self) -> np.ndarray:
        return self.latent_mean[self.model.p :]

    def eta_moments(self):
        """Grid-mixed posterior mean and sd of the linear predictor at the observations."""
        pts = self.grid.points
        return mixture_moments(self.grid.weights, [p.eta_mean for p in pts], [p.eta_var for p in pts])

    def hyper_mean(self, name: str) -> float:
        vals = hyper_transforms(self.model, self.grid.thetas)[name]
        return float(np.sum(self.grid.weights * vals))

    def summary(self) -> list:
        """Posterior mean, sd and 95% interval per parameter.

        Regression coefficients use the Gaussian-mixture mean and sd with a
        normal interval; hyperparameters use weighted grid moments and
        quantiles.
        """
        model = self.model
        if self.latent_sd is None:
            _, sd = latent_marginals(model, self.grid, indices=np.arange(model.p))
        else:
            sd = self.latent_sd[: model.p]
        out = []
        for j, name in enumerate(model.covariate_names):
            mu = float(self.beta_mean[j])
            out.append(ParameterSummary(name, mu, float(sd[j]), mu - Z975 * sd[j], mu + Z975 * sd[j]))
        w = self.grid.weights
        trans = hyper_transforms(model, self.grid.thetas)
        for k in ("alpha", "size", "range", "sigma", "sigma2", "tau", "kappa"):
            if k not in trans:
                continue
            v = trans[k]
            mean = float(np.sum(w * v))
            sdv = math.sqrt(max(float(np.sum(w * (v - mean) ** 2)), 0.0))
            out.append(ParameterSummary(k, mean, sdv, weighted_quantile(v, w, 0.025), weighted_quantile(v, w, 0.975)))
        return out


def fit(
    model: LatentModel,
    init=None,
    step: float = 0.75,
    drop: float = 6.0,
    correction: str = "cavity",
    engine: str = "auto",
    compute_sd: bool = False,
    z_max: float = 5.0,
    strategy: str = "grid",
) -> FitResult:
    """Grid exploration plus grid-mixed latent means (and sds on request)."""
    grid = explore_hyper_grid(
        model, init=init, step=step, drop=drop, correction=correction, engine=engine, z_max=z_max,
        strategy=strategy,
    )
    means = np.array([p.latent_mode for p in grid.points])
    latent_mean = np.tensordot(grid.weights, means, axes=1)
    latent_sd = latent_marginals(model, grid)[1] if compute_sd else None
    return FitResult(model, grid, latent_mean, latent_sd)


def prediction_design(model: LatentModel, locations, covariates=None):
    """Rows ``[x(s), A(s)]`` for new locations; intercept-only profile if no covariates."""
    if model.mesh is None:
        raise InferenceError("model has no mesh attached")
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    a = projector(model.mesh, locations)
    if covariates is None:
        x = np.zeros((len(locations), model.p))
        x[:, 0] = 1.0
    else:
        x = np.atleast_2d(np.asarray(covariates, dtype=float))
        if x.shape != (len(locations), model.p):
            raise ValueError(f"covariates must have shape ({len(locations)}, {model.p})")
    return sp.hstack([sp.csr_matrix(x), a]).tocsr()


def predict(model: LatentModel, fit_result: FitResult, locations, covariates=None):
    """Posterior mean and sd of the linear predictor at new locations."""
    rows = prediction_design(model, locations, covariates)
    means, variances = row_moments(model, fit_result.grid, rows)
    return mixture_moments(fit_result.grid.weights, means, variances)
