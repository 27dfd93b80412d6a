"""Stepwise maximum likelihood for the system of reduced-form equations.

Model per unit i and period t:

    x_it = pi z_it + pi_bar z̄_i (+ c) + a_i + eps_it,
    a_i ~ N(0, Lambda), eps_it ~ N(0, Sigma), both d_x-dimensional.

Estimation alternates (A) GLS for the slope vector delta given the variance
components with (B) the closed-form solution of the covariance first-order
conditions given delta, and evaluates the Gaussian log-likelihood through the
within/between decomposition of Omega_u = I_T (x) Sigma + E_T (x) Lambda.

Parameter-vector convention used by scores, Hessians and downstream
derivatives:  Theta1 = (delta, vech(Sigma), vech(Lambda)) where delta stacks
per-equation blocks (pi[j, :], pi_bar[j, :], intercept_j) and vech stacks the
lower triangle columnwise.  Derivatives with respect to a vech coordinate
perturb the symmetric pair (j, k)/(k, j) jointly, so off-diagonal score
entries carry the duplication factor 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import DegenerateError, RankError
from .numerics import TOL_PSD, KronInverse, eigen_clip
from .panel import PanelDataset, ReducedFormParams


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Theta1Layout:
    """Index bookkeeping for the stacked first-stage parameter vector."""

    d_x: int
    d_z: int
    intercept: bool

    @property
    def q(self) -> int:
        return 2 * self.d_z + (1 if self.intercept else 0)

    @property
    def p(self) -> int:
        return self.d_x * self.q

    @property
    def n_vech(self) -> int:
        return self.d_x * (self.d_x + 1) // 2

    @property
    def dim(self) -> int:
        return self.p + 2 * self.n_vech

    @property
    def vech_pairs(self) -> list:
        m = self.d_x
        return [(j, k) for k in range(m) for j in range(k, m)]

    def pack(self, params: ReducedFormParams) -> np.ndarray:
        m, dz = self.d_x, self.d_z
        rows = np.hstack([params.pi, params.pi_bar])
        if self.intercept:
            c = params.intercept if params.intercept is not None else np.zeros(m)
            rows = np.hstack([rows, c.reshape(m, 1)])
        pairs = self.vech_pairs
        vs = np.array([params.sigma_eps[j, k] for j, k in pairs])
        vl = np.array([params.lambda_alpha[j, k] for j, k in pairs])
        return np.concatenate([rows.ravel(), vs, vl])

    def unpack(self, theta: np.ndarray) -> ReducedFormParams:
        m, dz = self.d_x, self.d_z
        delta = theta[: self.p].reshape(m, self.q)
        pi = delta[:, :dz]
        pi_bar = delta[:, dz: 2 * dz]
        c = delta[:, 2 * dz] if self.intercept else None
        sig = self._vech_to_mat(theta[self.p: self.p + self.n_vech])
        lam = self._vech_to_mat(theta[self.p + self.n_vech:])
        return ReducedFormParams(pi=pi, pi_bar=pi_bar, sigma_eps=sig,
                                 lambda_alpha=lam, intercept=c)

    def _vech_to_mat(self, v: np.ndarray) -> np.ndarray:
        m = self.d_x
        out = np.zeros((m, m))
        for val, (j, k) in zip(v, self.vech_pairs):
            out[j, k] = out[k, j] = val
        return out

    def vech_dup(self, mats: np.ndarray) -> np.ndarray:
        """Map symmetric gradient matrices (..., m, m) to duplication-weighted
        vech vectors (..., n_vech)."""
        cols = []
        for j, k in self.vech_pairs:
            w = 1.0 if j == k else 2.0
            cols.append(w * mats[..., j, k])
        return np.stack(cols, axis=-1)

    def sym_unit(self, a: int) -> np.ndarray:
        """Symmetric basis matrix E_a for vech coordinate a."""
        j, k = self.vech_pairs[a]
        e = np.zeros((self.d_x, self.d_x))
        e[j, k] = 1.0
        e[k, j] = 1.0
        return e


def design_z2(data: PanelDataset, intercept: bool) -> np.ndarray:
    """Per-observation regressor vector z2_it = (z_it', z̄_i'[, 1])', N x T x q."""
    zbar = np.repeat(data.z_bar[:, None, :], data.periods, axis=1)
    blocks = [data.Z, zbar]
    if intercept:
        blocks.append(np.ones((data.n_units, data.periods, 1)))
    return np.concatenate(blocks, axis=2)


def residuals(data: PanelDataset, layout: Theta1Layout, delta: np.ndarray,
              z2: np.ndarray | None = None) -> np.ndarray:
    if z2 is None:
        z2 = design_z2(data, layout.intercept)
    rows = delta.reshape(layout.d_x, layout.q)
    return data.X - np.einsum("itq,jq->itj", z2, rows)


# ---------------------------------------------------------------------------
# stepwise pieces
# ---------------------------------------------------------------------------

def gls_step(data: PanelDataset, sigma_eps: np.ndarray, lambda_alpha: np.ndarray,
             intercept: bool = True) -> np.ndarray:
    """GLS coefficient vector delta for known variance components.

    Solves the normal equations of min_delta sum_i Q_i built from the
    within/between blocks; a singular system raises RankError.
    """
    kron = KronInverse(sigma_eps, lambda_alpha, data.periods)
    z2 = design_z2(data, intercept)
    z2_bar = z2.mean(axis=1)
    z2_dot = z2 - z2_bar[:, None, :]
    x_bar = data.X.mean(axis=1)
    x_dot = data.X - x_bar[:, None, :]
    wz = np.einsum("itq,itr->qr", z2_dot, z2_dot)
    bz = data.periods * np.einsum("iq,ir->qr", z2_bar, z2_bar)
    a_mat = np.kron(kron.sigma_inv, wz) + np.kron(kron.s_T_inv, bz)
    b_mat = (np.einsum("jk,itk,itq->jq", kron.sigma_inv, x_dot, z2_dot)
             + data.periods * np.einsum("jk,ik,iq->jq", kron.s_T_inv, x_bar, z2_bar))
    try:
        delta = sla.solve(a_mat, b_mat.ravel(), assume_a="pos")
    except (sla.LinAlgError, ValueError):
        raise RankError("singular GLS normal equations (collinear design?)",
                        module="reduced_form")
    if not np.isfinite(delta).all():
        raise RankError("GLS produced non-finite coefficients", module="reduced_form")
    return delta


def covariance_step(data: PanelDataset, delta: np.ndarray, intercept: bool = True):
    """Closed-form covariance update from the likelihood first-order conditions.

    Sigma_hat = W_sum / (N (T-1)), S_T_hat = B_sum / N and
    Lambda_hat = (S_T_hat - Sigma_hat) / T, eigenvalue-clipped to the PSD cone.
    """
    N, T, m = data.n_units, data.periods, data.d_x
    if N * (T - 1) < m:
        raise DegenerateError(f"N(T-1) = {N * (T - 1)} < d_x = {m}",
                              module="reduced_form")
    layout = Theta1Layout(d_x=m, d_z=data.d_z, intercept=intercept)
    u = residuals(data, layout, delta)
    ubar = u.mean(axis=1)
    udot = u - ubar[:, None, :]
    w_sum = np.einsum("itj,itk->jk", udot, udot)
    b_sum = T * np.einsum("ij,ik->jk", ubar, ubar)
    sigma = w_sum / (N * (T - 1))
    s_T = b_sum / N
    lam = eigen_clip((s_T - sigma) / T, floor=TOL_PSD)
    return 0.5 * (sigma + sigma.T), lam


def loglik(data: PanelDataset, delta: np.ndarray, sigma_eps: np.ndarray,
           lambda_alpha: np.ndarray, intercept: bool = True) -> float:
    """Gaussian log-likelihood with |Omega_u| = |S_T| |Sigma|^(T-1)."""
    N, T, m = data.n_units, data.periods, data.d_x
    layout = Theta1Layout(d_x=m, d_z=data.d_z, intercept=intercept)
    kron = KronInverse(sigma_eps, lambda_alpha, T)
    u = residuals(data, layout, delta)
    ubar = u.mean(axis=1)
    udot = u - ubar[:, None, :]
    quad = (np.einsum("itj,jk,itk->", udot, kron.sigma_inv, udot)
            + T * np.einsum("ij,jk,ik->", ubar, kron.s_T_inv, ubar))
    return float(-0.5 * m * N * T * np.log(2.0 * np.pi)
                 - 0.5 * N * kron.logdet() - 0.5 * quad)


@dataclass(frozen=True)
class ReducedFormFit:
    params: ReducedFormParams
    loglik: float
    n_iter: int
    converged: bool
    per_unit_scores: np.ndarray
    hessian: np.ndarray
    layout: Theta1Layout
    loglik_history: tuple

    @property
    def theta(self) -> np.ndarray:
        return self.layout.pack(self.params)

    def report_lines(self) -> list:
        p = self.params
        lines = [f"log-likelihood: {self.loglik:.10g}",
                 f"iterations: {self.n_iter} (converged={self.converged})"]
        for name, mat in (("pi", p.pi), ("pi_bar", p.pi_bar),
                          ("sigma_eps", p.sigma_eps), ("lambda_alpha", p.lambda_alpha)):
            for j, row in enumerate(np.atleast_2d(mat)):
                lines.append(f"{name}[{j}]: " + " ".join(f"{v:.10g}" for v in row))
        if p.intercept is not None:
            lines.append("intercept: " + " ".join(f"{v:.10g}" for v in p.intercept))
        return lines


def fit_stepwise(data: PanelDataset, max_iter: int = 500, tol_loglik: float = 1e-9,
                 intercept: bool = True) -> ReducedFormFit:
    """Alternate GLS and covariance steps until the log-likelihood settles.

    Starts from pooled OLS (Sigma = I, Lambda = 0).  Non-convergence returns a
    fit flagged converged=False rather than raising.
    """
    m = data.d_x
    sigma = np.eye(m)
    lam = np.zeros((m, m))
    ll_prev = -np.inf
    history = []
    converged = False
    n_iter = 0
    delta = None
    for n_iter in range(1, max_iter + 1):
        delta = gls_step(data, sigma, lam, intercept=intercept)
        sigma, lam = covariance_step(data, delta, intercept=intercept)
        ll = loglik(data, delta, sigma, lam, intercept=intercept)
        history.append(ll)
        if abs(ll - ll_prev) < tol_loglik:
            converged = True
            break
        ll_prev = ll
    layout = Theta1Layout(d_x=m, d_z=data.d_z, intercept=intercept)
    lam = eigen_clip(lam, floor=TOL_PSD)
    sigma = eigen_clip(sigma, floor=TOL_PSD)
    rows = delta.reshape(m, layout.q)
    params = ReducedFormParams(
        pi=rows[:, : data.d_z],
        pi_bar=rows[:, data.d_z: 2 * data.d_z],
        sigma_eps=sigma,
        lambda_alpha=lam,
        intercept=rows[:, 2 * data.d_z] if intercept else None)
    scores, hessian = score_and_hessian(data, params)
    return ReducedFormFit(params=params, loglik=history[-1], n_iter=n_iter,
                          converged=converged, per_unit_scores=scores,
                          hessian=hessian, layout=layout,
                          loglik_history=tuple(history))


# ---------------------------------------------------------------------------
# analytic score and Hessian
# ---------------------------------------------------------------------------

def score_and_hessian(data: PanelDataset, params: ReducedFormParams):
    """Per-unit score matrix (N x dim) and summed Hessian (dim x dim) of the
    log-likelihood at an arbitrary SPD parameter point.

    Layout and duplication convention as documented in the module docstring;
    validated against central finite differences in the test suite.
    """
    N, T, m = data.n_units, data.periods, data.d_x
    intercept = params.intercept is not None
    layout = Theta1Layout(d_x=m, d_z=data.d_z, intercept=intercept)
    kron = KronInverse(params.sigma_eps, params.lambda_alpha, T)
    sig_inv, st_inv = kron.sigma_inv, kron.s_T_inv

    z2 = design_z2(data, intercept)
    z2_bar = z2.mean(axis=1)
    z2_dot = z2 - z2_bar[:, None, :]
    u = residuals(data, layout, layout.pack(params)[: layout.p], z2=z2)
    ubar = u.mean(axis=1)
    udot = u - ubar[:, None, :]

    # scores -----------------------------------------------------------------
    v = udot @ sig_inv + (ubar @ st_inv)[:, None, :]          # N x T x m
    score_delta = np.einsum("itj,itq->ijq", v, z2).reshape(N, layout.p)

    w_units = np.einsum("itj,itk->ijk", udot, udot)           # N x m x m
    b_units = T * np.einsum("ij,ik->ijk", ubar, ubar)
    g_sig = -0.5 * (st_inv + (T - 1) * sig_inv
                    - sig_inv @ w_units @ sig_inv
                    - st_inv @ b_units @ st_inv)
    g_lam = -0.5 * T * (st_inv - st_inv @ b_units @ st_inv)
    scores = np.concatenate([score_delta, layout.vech_dup(g_sig),
                             layout.vech_dup(g_lam)], axis=1)

    # Hessian ----------------------------------------------------------------
    wz = np.einsum("itq,itr->qr", z2_dot, z2_dot)
    bz = T * np.einsum("iq,ir->qr", z2_bar, z2_bar)
    w_sum = w_units.sum(axis=0)
    b_sum = b_units.sum(axis=0)
    gw = np.einsum("itq,itj->qj", z2_dot, udot)               # q x m
    gb = T * np.einsum("iq,ij->qj", z2_bar, ubar)

    nv = layout.n_vech
    h = np.zeros((layout.dim, layout.dim))
    h_dd = -(np.kron(sig_inv, wz) + np.kron(st_inv, bz))
    h[: layout.p, : layout.p] = h_dd

    units = [layout.sym_unit(a) for a in range(nv)]
    m1 = [sig_inv @ e @ sig_inv for e in units]               # d(Sigma^-1) direction
    m2 = [st_inv @ e @ st_inv for e in units]                 # d(S_T^-1), Sigma perturbed
    for a in range(nv):
        col = -(m1[a] @ gw.T + m2[a] @ gb.T).ravel()
        h[: layout.p, layout.p + a] = col
        h[layout.p + a, : layout.p] = col
        col = -T * (m2[a] @ gb.T).ravel()
        h[: layout.p, layout.p + nv + a] = col
        h[layout.p + nv + a, : layout.p] = col

    def dscore_sigma(e_dir, t_factor):
        """d(summed G_Sigma) under a perturbation of S_T by t_factor * E and,
        when t_factor == 1, of Sigma itself by E."""
        st_e_st = st_inv @ e_dir @ st_inv
        d = -0.5 * (-N * t_factor * st_e_st
                    + t_factor * (st_e_st @ b_sum @ st_inv + st_inv @ b_sum @ st_e_st))
        if t_factor == 1.0:
            sig_e_sig = sig_inv @ e_dir @ sig_inv
            d = d - 0.5 * (-N * (T - 1) * sig_e_sig
                           + sig_e_sig @ w_sum @ sig_inv + sig_inv @ w_sum @ sig_e_sig)
        return d

    def dscore_lambda(e_dir, t_factor):
        st_e_st = st_inv @ e_dir @ st_inv
        return -0.5 * T * (-N * t_factor * st_e_st
                           + t_factor * (st_e_st @ b_sum @ st_inv
                                         + st_inv @ b_sum @ st_e_st))

    for b in range(nv):
        e_b = units[b]
        d_ss = dscore_sigma(e_b, 1.0)
        d_sl = dscore_sigma(e_b, float(T))     # Sigma-score, Lambda perturbed
        d_ll = dscore_lambda(e_b, float(T))
        for a in range(nv):
            j, k = layout.vech_pairs[a]
            wgt = 1.0 if j == k else 2.0
            h[layout.p + a, layout.p + b] = wgt * d_ss[j, k]
            h[layout.p + a, layout.p + nv + b] = wgt * d_sl[j, k]
            h[layout.p + nv + b, layout.p + a] = wgt * d_sl[j, k]
            h[layout.p + nv + a, layout.p + nv + b] = wgt * d_ll[j, k]
    return scores, h
