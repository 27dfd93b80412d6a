"""Shared numerical kernels.

SPD solves with a Cholesky-first/eigendecomposition-fallback policy, the
Kronecker-structured inverse used by the random-effects likelihood, standard
normal CDF/PDF/quantile wrappers, multivariate-normal sampling, and a central
finite-difference harness used throughout the test suite.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla
from scipy import special as sp

from .errors import DomainError

#: relative eigenvalue tolerance below which a matrix counts as non-SPD
TOL_PSD = 1e-10


# ---------------------------------------------------------------------------
# standard normal
# ---------------------------------------------------------------------------

def norm_cdf(x):
    return sp.ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def norm_logcdf(x):
    return sp.log_ndtr(x)


def norm_quantile(p):
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError("quantile argument must lie strictly inside (0, 1)",
                          module="numerics")
    return sp.ndtri(p)


# ---------------------------------------------------------------------------
# SPD matrices
# ---------------------------------------------------------------------------

def check_symmetric(mat: np.ndarray, name: str = "matrix", tol: float = 1e-8) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DomainError(f"{name} must be square, got shape {mat.shape}", module="numerics")
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() > tol * scale:
        raise DomainError(f"{name} is not symmetric", module="numerics")
    return 0.5 * (mat + mat.T)


def eigen_clip(mat: np.ndarray, floor: float = TOL_PSD) -> np.ndarray:
    """Project a symmetric matrix onto matrices with eigenvalues >= floor."""
    mat = 0.5 * (np.asarray(mat, dtype=float) + np.asarray(mat, dtype=float).T)
    w, v = np.linalg.eigh(mat)
    if w.min() >= floor:
        return mat
    w = np.maximum(w, floor)
    return (v * w) @ v.T


class SpdMatrix:
    """Dense symmetric positive definite matrix with a cached factorization.

    Cholesky first; if that fails but the spectrum is within ``tol`` of PSD
    the matrix is eigenvalue-clipped and refactored, otherwise DomainError.
    """

    def __init__(self, mat, tol: float = TOL_PSD, name: str = "matrix"):
        mat = check_symmetric(mat, name=name)
        self.tol = tol
        self.name = name
        try:
            self._chol = sla.cho_factor(mat, lower=True)
            self.mat = mat
        except sla.LinAlgError:
            w = np.linalg.eigvalsh(mat)
            scale = max(float(w.max()), tol)
            if w.min() < -tol * scale:
                raise DomainError(f"{name} is not positive definite "
                                  f"(min eigenvalue {w.min():.3e})", module="numerics")
            self.mat = eigen_clip(mat, floor=tol * scale)
            self._chol = sla.cho_factor(self.mat, lower=True)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def solve(self, b):
        return sla.cho_solve(self._chol, np.asarray(b, dtype=float))

    def inv(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))

    def logdet(self) -> float:
        return 2.0 * float(np.log(np.diag(self._chol[0])).sum())

    def chol_lower(self) -> np.ndarray:
        return np.tril(self._chol[0])


def spd_inverse(mat, name: str = "matrix") -> np.ndarray:
    return SpdMatrix(mat, name=name).inv()


# ---------------------------------------------------------------------------
# Kronecker-structured inverse of I_T (x) Sigma + E_T (x) Lambda
# ---------------------------------------------------------------------------

class KronInverse:
    """Applies the inverse of ``Omega = I_T (x) Sigma + E_T (x) Lambda``.

    Uses the within/between decomposition
    ``Omega^{-1} = K_T (x) Sigma^{-1} + J_T (x) S_T^{-1}`` with
    ``S_T = Sigma + T * Lambda``, so the mT x mT matrix is never formed, and
    ``log|Omega| = log|S_T| + (T-1) log|Sigma|``.
    """

    def __init__(self, sigma, lam, T: int):
        if T < 1:
            raise DomainError("T must be >= 1", module="numerics")
        self.T = int(T)
        self.sigma = SpdMatrix(sigma, name="sigma")
        lam = check_symmetric(lam, name="lambda")
        if lam.shape != self.sigma.mat.shape:
            raise DomainError("sigma and lambda must have the same shape",
                              module="numerics")
        w = np.linalg.eigvalsh(lam)
        if w.min() < -TOL_PSD * max(1.0, abs(w.max())):
            raise DomainError("lambda must be positive semidefinite", module="numerics")
        self.lam = lam
        self.s_T = SpdMatrix(self.sigma.mat + self.T * lam, name="sigma + T*lambda")
        self.sigma_inv = self.sigma.inv()
        self.s_T_inv = self.s_T.inv()

    @property
    def dim(self) -> int:
        return self.sigma.dim

    def logdet(self) -> float:
        return self.s_T.logdet() + (self.T - 1) * self.sigma.logdet()

    def det(self) -> float:
        return float(np.exp(self.logdet()))

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Compute ``Omega^{-1} u`` for ``u`` of shape (T, m) or (T*m,)."""
        u = np.asarray(u, dtype=float)
        flat = u.ndim == 1
        if flat:
            u = u.reshape(self.T, self.dim)
        if u.shape != (self.T, self.dim):
            raise DomainError(f"expected shape ({self.T}, {self.dim}), got {u.shape}",
                              module="numerics")
        ubar = u.mean(axis=0)
        out = (u - ubar) @ self.sigma_inv + ubar @ self.s_T_inv
        return out.ravel() if flat else out

    def quad_form(self, u: np.ndarray) -> float:
        """Compute ``u' Omega^{-1} u``; always >= 0."""
        u = np.asarray(u, dtype=float).reshape(self.T, self.dim)
        return float(np.sum(u * self.apply(u)))

    def dense(self) -> np.ndarray:
        """Dense Omega (for small T*m; tests only)."""
        T, m = self.T, self.dim
        return (np.kron(np.eye(T), self.sigma.mat)
                + np.kron(np.ones((T, T)), self.lam))


def kron_structured_inverse(sigma, lam, T: int) -> KronInverse:
    """Applicator for Omega_u(T)^{-1} without forming the mT x mT matrix."""
    return KronInverse(sigma, lam, T)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff(f, x, rel_step: float | None = None, richardson: bool = False) -> np.ndarray:
    """Central-difference gradient/Jacobian of ``f`` at ``x``.

    Step per coordinate is ``h_i = rel_step * max(1, |x_i|)`` with
    ``rel_step = eps**(1/3)`` by default.  With ``richardson=True`` a single
    Richardson extrapolation combines steps h and h/2.
    """
    x = np.asarray(x, dtype=float)
    if rel_step is None:
        rel_step = float(np.finfo(float).eps) ** (1.0 / 3.0)
    f0 = np.asarray(f(x), dtype=float)
    cols = []
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))

        def central(step):
            xp = x.copy(); xp[i] += step
            xm = x.copy(); xm[i] -= step
            return (np.asarray(f(xp), dtype=float) - np.asarray(f(xm), dtype=float)) / (2.0 * step)

        d = central(h)
        if richardson:
            d = (4.0 * central(h / 2.0) - d) / 3.0
        cols.append(d)
    jac = np.stack(cols, axis=-1)
    if f0.ndim == 0:
        return jac.reshape(x.size)
    return jac


# ---------------------------------------------------------------------------
# multivariate normal sampling
# ---------------------------------------------------------------------------

def mvn_chol(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a covariance; eigenvalue fallback if near-PSD."""
    cov = check_symmetric(cov, name="covariance")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        scale = max(float(w.max()), 1.0)
        if w.min() < -TOL_PSD * scale:
            raise DomainError("covariance is not positive semidefinite", module="numerics")
        return v * np.sqrt(np.maximum(w, 0.0))


def sample_mvn(rng: np.random.Generator, cov: np.ndarray, size: int) -> np.ndarray:
    """Draw ``size`` rows from N(0, cov), deterministic given the generator state."""
    L = mvn_chol(cov)
    return rng.standard_normal((size, cov.shape[0])) @ L.T
