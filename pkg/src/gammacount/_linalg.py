"""Symmetric positive-definite factorizations with a common interface.

Dense LAPACK Cholesky is faster than SuperLU for the latent dimensions that
show up in practice (a few hundred to ~1000 unknowns), so ``cholesky`` picks
the dense path below ``DENSE_LIMIT`` and a symmetric-mode sparse LU above it.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

DENSE_LIMIT = 1500


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be SPD fails to factorize."""


class DenseCholesky:
    """Lower Cholesky factor ``A = L L'`` of a dense SPD matrix."""

    def __init__(self, a):
        a = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)
        try:
            self.L = sla.cholesky(a, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise NotPositiveDefiniteError(str(exc)) from exc
        if not np.all(np.isfinite(self.L)):
            raise NotPositiveDefiniteError("non-finite Cholesky factor")
        self.n = a.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, b):
        return sla.cho_solve((self.L, True), b, check_finite=False)

    def solve_L(self, b):
        """Return ``L^{-1} b``."""
        return sla.solve_triangular(self.L, b, lower=True, check_finite=False)

    def solve_Lt(self, b):
        """Return ``L^{-T} b``; maps standard normals to draws from N(0, A^{-1})."""
        return sla.solve_triangular(self.L, b, lower=True, trans="T", check_finite=False)

    def inv_diag(self):
        linv = self.solve_L(np.eye(self.n))
        return np.einsum("ij,ij->j", linv, linv)


class SparseCholesky:
    """``A = P L D L' P'`` from SuperLU run with diagonal pivoting.

    With ``diag_pivot_thresh=0`` and symmetric mode SuperLU keeps the row and
    column permutations equal, so ``U = D L'`` and the factor is a permuted
    LDL' decomposition.
    """

    def __init__(self, a):
        a = sp.csc_matrix(a)
        self.n = a.shape[0]
        try:
            lu = splu(
                a,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise NotPositiveDefiniteError(str(exc)) from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NotPositiveDefiniteError("pivoting broke symmetry; matrix is not SPD")
        d = lu.U.diagonal()
        if np.any(~np.isfinite(d)) or np.any(d <= 0.0):
            raise NotPositiveDefiniteError("non-positive pivot in sparse factorization")
        self._lu = lu
        self._d = d
        self._sqrt_d = np.sqrt(d)
        # Pr @ A @ Pc = L @ U, with Pc = Pr'.
        n = self.n
        self._pc = sp.csc_matrix((np.ones(n), (np.arange(n), lu.perm_c)), shape=(n, n))
        self._L = sp.csr_matrix(lu.L)

    def logdet(self) -> float:
        return float(np.sum(np.log(self._d)))

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))

    def solve_Lt(self, b):
        b = np.asarray(b, dtype=float)
        scaled = b / (self._sqrt_d[:, None] if b.ndim == 2 else self._sqrt_d)
        y = sp.linalg.spsolve_triangular(self._L.T.tocsr(), scaled, lower=False, unit_diagonal=True)
        return self._pc @ y

    def solve_L(self, b):
        b = np.asarray(b, dtype=float)
        y = sp.linalg.spsolve_triangular(self._L, self._pc.T @ b, lower=True, unit_diagonal=True)
        return y / (self._sqrt_d[:, None] if y.ndim == 2 else self._sqrt_d)

    def inv_diag(self):
        linv = self.solve_L(np.eye(self.n))
        return np.einsum("ij,ij->j", linv, linv)


def cholesky(a, dense_limit: int = DENSE_LIMIT):
    """Factorize a symmetric positive-definite matrix (dense or sparse)."""
    if a.shape[0] <= dense_limit:
        return DenseCholesky(a)
    return SparseCholesky(a)
