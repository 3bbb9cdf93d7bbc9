"""Matérn fields through the SPDE / finite-element GMRF construction.

For smoothness ``nu`` in dimension ``d`` the field solving
``(kappa^2 - Laplacian)^{(nu + d/2)/2} (tau x) = white noise`` has Matérn
covariance with variance ``Gamma(nu) / (Gamma(nu + d/2) (4 pi)^{d/2} kappa^{2 nu} tau^2)``.
With piecewise-linear elements and a lumped mass matrix, ``nu = 1`` in 2-D
gives the sparse precision ``tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy import special

from ._linalg import NotPositiveDefiniteError, cholesky
from .mesh import Mesh, MeshError


@dataclass(frozen=True)
class MaternParams:
    sigma2: float
    kappa: float
    nu: float = 1.0
    dim: int = 2

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.kappa > 0 and self.nu > 0):
            raise ValueError("sigma2, kappa and nu must be positive")

    @classmethod
    def from_range(cls, sigma2: float, range_: float, nu: float = 1.0, dim: int = 2) -> "MaternParams":
        return cls(sigma2, range_to_kappa(range_, nu), nu, dim)

    @property
    def range(self) -> float:
        return kappa_to_range(self.kappa, self.nu)

    @property
    def tau_spde(self) -> float:
        return sigma_to_tau(self.sigma2, self.kappa, self.nu, self.dim)

    @property
    def zeta(self) -> float:
        return self.nu + self.dim / 2.0


@dataclass(frozen=True)
class PcPriorSpec:
    """Tail statements ``P(sigma > sigma0) = q1`` and ``P(range < r0) = q2``."""

    sigma0: float
    q1: float
    r0: float
    q2: float

    def __post_init__(self):
        if not (self.sigma0 > 0 and self.r0 > 0):
            raise ValueError("sigma0 and r0 must be positive")
        if not (0 < self.q1 < 1 and 0 < self.q2 < 1):
            raise ValueError("q1 and q2 must lie in (0, 1)")

    @property
    def lambda_sigma(self) -> float:
        return -math.log(self.q1) / self.sigma0

    @property
    def lambda_range(self) -> float:
        return -math.log(self.q2) * self.r0


# ---------------------------------------------------------------------------
# covariance and parameter links
# ---------------------------------------------------------------------------


def matern_cov(distance, params: MaternParams):
    """Matérn covariance ``sigma2 / (2^{nu-1} Gamma(nu)) (kappa h)^nu K_nu(kappa h)``."""
    h = np.asarray(distance, dtype=float)
    if np.any(h < 0):
        raise ValueError("distance must be non-negative")
    nu = params.nu
    kh = params.kappa * h
    with np.errstate(invalid="ignore", divide="ignore"):
        val = params.sigma2 / (2.0 ** (nu - 1.0) * special.gamma(nu)) * kh**nu * special.kv(nu, kh)
    val = np.where(kh == 0.0, params.sigma2, val)
    # K_nu overflows at subnormal kh (limit sigma2) and underflows far out (limit 0)
    val = np.where(np.isfinite(val), val, np.where(kh < 1.0, params.sigma2, 0.0))
    return float(val) if val.ndim == 0 else val


def range_to_kappa(range_: float, nu: float = 1.0) -> float:
    """Empirical range ``r = sqrt(8 nu) / kappa``, inverted."""
    if range_ <= 0 or nu <= 0:
        raise ValueError("range and nu must be positive")
    return math.sqrt(8.0 * nu) / range_


def kappa_to_range(kappa: float, nu: float = 1.0) -> float:
    if kappa <= 0 or nu <= 0:
        raise ValueError("kappa and nu must be positive")
    return math.sqrt(8.0 * nu) / kappa


def _variance_constant(nu, dim):
    return math.gamma(nu) / (math.gamma(nu + dim / 2.0) * (4.0 * math.pi) ** (dim / 2.0))


def sigma_to_tau(sigma2: float, kappa: float, nu: float = 1.0, dim: int = 2) -> float:
    if sigma2 <= 0 or kappa <= 0:
        raise ValueError("sigma2 and kappa must be positive")
    return math.sqrt(_variance_constant(nu, dim) / (kappa ** (2.0 * nu) * sigma2))


def tau_to_sigma2(tau: float, kappa: float, nu: float = 1.0, dim: int = 2) -> float:
    if tau <= 0 or kappa <= 0:
        raise ValueError("tau and kappa must be positive")
    return _variance_constant(nu, dim) / (kappa ** (2.0 * nu) * tau**2)


# ---------------------------------------------------------------------------
# finite elements
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Lumped mass (diagonal, stored as a vector) and stiffness matrices."""

    c_tilde: np.ndarray
    g: sp.csc_matrix

    @property
    def n(self) -> int:
        return len(self.c_tilde)

    @cached_property
    def c_matrix(self) -> sp.csc_matrix:
        return sp.diags(self.c_tilde, format="csc")

    @cached_property
    def g_cinv_g(self) -> sp.csc_matrix:
        m = self.g @ sp.diags(1.0 / self.c_tilde) @ self.g
        # the sparse product is symmetric only up to rounding
        return (0.5 * (m + m.T)).tocsc()

    @cached_property
    def spectral(self):
        """Generalized eigenpairs ``G v = lam C v`` as ``(lam, V)`` with ``V' C V = I``.

        In this basis ``Q = tau^2 C V diag((kappa^2 + lam)^2) V' C`` and
        ``Q^{-1} = V diag(1 / (tau^2 (kappa^2 + lam)^2)) V'``.
        """
        s = 1.0 / np.sqrt(self.c_tilde)
        m = (self.g.multiply(s[:, None]).multiply(s[None, :])).toarray()
        lam, u = np.linalg.eigh(0.5 * (m + m.T))
        lam = np.maximum(lam, 0.0)
        v = s[:, None] * u
        lam.setflags(write=False)
        v.setflags(write=False)
        return lam, v

    def field_variances(self, kappa: float, tau: float) -> np.ndarray:
        """Prior variances of the spectral coefficients, ``1 / (tau^2 (kappa^2 + lam)^2)``."""
        lam, _ = self.spectral
        return 1.0 / (tau * tau * (kappa * kappa + lam) ** 2)


def fem_matrices(mesh: Mesh) -> FemMatrices:
    """Assemble the lumped mass and P1 stiffness matrices of a triangulation."""
    v, t = mesh.vertices, mesh.triangles
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    area2 = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    bad = np.flatnonzero(np.abs(area2) <= 1e-14 * max(1.0, float(np.abs(area2).max(initial=0.0))))
    if bad.size:
        raise MeshError(f"triangle {bad[0]} {tuple(t[bad[0]])} is degenerate")
    area = 0.5 * np.abs(area2)
    # gradients of the hat functions: (b, c) / (2 * signed area)
    b = np.stack([p1[:, 1] - p2[:, 1], p2[:, 1] - p0[:, 1], p0[:, 1] - p1[:, 1]], axis=1)
    c = np.stack([p2[:, 0] - p1[:, 0], p0[:, 0] - p2[:, 0], p1[:, 0] - p0[:, 0]], axis=1)
    local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * area)[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    m = mesh.n_vertices
    g = sp.csc_matrix((local.ravel(), (rows, cols)), shape=(m, m))
    g = (0.5 * (g + g.T)).tocsc()
    c_tilde = np.bincount(t.ravel(), weights=np.repeat(area / 3.0, 3), minlength=m)
    if np.any(c_tilde <= 0):
        raise MeshError("mesh has vertices not used by any triangle")
    return FemMatrices(c_tilde, g)


def precision_matrix(fem: FemMatrices, kappa: float, tau: float) -> sp.csc_matrix:
    """SPDE precision ``tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)`` for nu = 1, d = 2."""
    if kappa <= 0 or tau <= 0:
        raise ValueError("kappa and tau must be positive")
    k2 = kappa * kappa
    q = (tau * tau) * (k2 * k2 * fem.c_matrix + 2.0 * k2 * fem.g + fem.g_cinv_g)
    return q.tocsc()


def precision_logdet(fem: FemMatrices, kappa: float, tau: float) -> float:
    """log det Q via ``Q = tau^2 K C^{-1} K`` with ``K = kappa^2 C + G``."""
    k = (kappa * kappa * fem.c_matrix + fem.g).tocsc()
    return 2.0 * fem.n * math.log(tau) + 2.0 * cholesky(k).logdet() - float(np.sum(np.log(fem.c_tilde)))


def check_positive_definite(q) -> None:
    """Raise ``NotPositiveDefiniteError`` unless ``q`` is symmetric positive definite."""
    diff = abs(q - q.T)
    if diff.nnz and diff.max() > 1e-10 * abs(q).max():
        raise NotPositiveDefiniteError("matrix is not symmetric")
    cholesky(q)


def projector(mesh: Mesh, locations) -> sp.csr_matrix:
    """Barycentric interpolation matrix from mesh vertices to locations."""
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    tri, bary = mesh.locate(locations, strict=True)
    n = len(locations)
    cols = mesh.triangles[tri]
    a = sp.csr_matrix((bary.ravel(), (np.repeat(np.arange(n), 3), cols.ravel())), shape=(n, mesh.n_vertices))
    a.eliminate_zeros()
    return a


def sample_gmrf(q, rng: np.random.Generator, size: int | None = None):
    """Draw from N(0, Q^{-1}) by back-substituting standard normals through the factor."""
    factor = cholesky(q)
    n = q.shape[0]
    if size is None:
        return factor.solve_Lt(rng.standard_normal(n))
    return factor.solve_Lt(rng.standard_normal((n, size))).T


def pc_prior_logdensity(sigma: float, range_: float, spec: PcPriorSpec) -> float:
    """Joint penalized-complexity log-density of (sigma, range) for a 2-D Matérn field."""
    if sigma <= 0 or range_ <= 0:
        raise ValueError("sigma and range must be positive")
    ls, lr = spec.lambda_sigma, spec.lambda_range
    return math.log(ls) - ls * sigma + math.log(lr) - 2.0 * math.log(range_) - lr / range_
