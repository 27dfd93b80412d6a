"""Second-stage estimation of the CF-augmented binary-response model.

The design row for observation (i, t) is (x_it', w_it', alpha_hat_i',
eps_hat_it') in that fixed order.  Coefficients are probit-scale normalized
(the latent error variance is absorbed, sigma_eta = 1).  The GEE/MWNLS path
minimizes the working-covariance quadratic form with an exchangeable
correlation matrix; pooled probit is the special case C = I.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .control_functions import ControlFunctionSet
from .errors import ClampError, RankError, SeparationError, ShapeError
from .numerics import norm_cdf, norm_logcdf, norm_pdf
from .panel import PanelDataset, SecondStageParams

#: winsorization bound for fitted probabilities when standardizing residuals
PROB_FLOOR = 1e-10
#: coefficient norm beyond which the probit declares perfect separation
SEPARATION_NORM = 1e3


def build_design(data: PanelDataset, cf: ControlFunctionSet) -> np.ndarray:
    """Stacked NT x (d_x + d_w + 2 d_x) design, unit-major row order.

    Columns: x, then w, then alpha_hat, then eps_hat.  A regression constant,
    when wanted, is a w column of ones on the dataset.
    """
    if cf.eps_hat.shape[:2] != (data.n_units, data.periods):
        raise ShapeError("control functions do not match the dataset",
                         module="second_stage")
    n, T = data.n_units, data.periods
    alpha = np.repeat(cf.alpha_hat[:, None, :], T, axis=1)
    blocks = [data.X, data.W, alpha, cf.eps_hat]
    return np.concatenate(blocks, axis=2).reshape(n * T, -1)


@dataclass(frozen=True)
class SecondStageFit:
    params: SecondStageParams
    method: str                     # "pooled_probit" | "gee"
    rho_work: float
    naive_cov: np.ndarray
    loglik_or_objective: float
    n_iter: int
    converged: bool
    d_x: int
    v2_star: np.ndarray | None = None

    @property
    def theta(self) -> np.ndarray:
        return self.params.theta

    def with_v2_star(self, v2: np.ndarray) -> "SecondStageFit":
        return replace(self, v2_star=v2)


# ---------------------------------------------------------------------------
# pooled probit
# ---------------------------------------------------------------------------

def probit_loglik(theta: np.ndarray, y: np.ndarray, design: np.ndarray) -> float:
    idx = design @ theta
    return float(np.sum(y * norm_logcdf(idx) + (1.0 - y) * norm_logcdf(-idx)))


def probit_score_weights(theta: np.ndarray, y: np.ndarray, design: np.ndarray):
    """Per-observation score factor lambda and curvature weight lambda*(lambda+idx)."""
    idx = design @ theta
    log_pdf = -0.5 * idx * idx - 0.5 * np.log(2.0 * np.pi)
    mills_pos = np.exp(log_pdf - norm_logcdf(idx))      # phi/Phi
    mills_neg = np.exp(log_pdf - norm_logcdf(-idx))     # phi/(1-Phi)
    lam = y * mills_pos - (1.0 - y) * mills_neg
    curv = lam * (lam + idx)
    return lam, curv


def probit_gradient(theta: np.ndarray, y: np.ndarray, design: np.ndarray) -> np.ndarray:
    lam, _ = probit_score_weights(theta, y, design)
    return design.T @ lam


def fit_pooled_probit(y: np.ndarray, design: np.ndarray, max_iter: int = 100,
                      tol_grad: float = 1e-9, d_x: int | None = None) -> SecondStageFit:
    """Newton iterations with step-halving on the globally concave pooled
    Bernoulli-probit log-likelihood; start at the zero vector."""
    y = np.asarray(y, dtype=float).ravel()
    design = np.asarray(design, dtype=float)
    n, k = design.shape
    if y.shape[0] != n:
        raise ShapeError("y and design row counts differ", module="second_stage")
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankError("second-stage design is rank deficient", module="second_stage")
    theta = np.zeros(k)
    ll = probit_loglik(theta, y, design)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        lam, curv = probit_score_weights(theta, y, design)
        grad = design.T @ lam
        if np.abs(grad).max() < tol_grad * max(1.0, n / 1000.0):
            converged = True
            break
        hess = (design * curv[:, None]).T @ design
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise RankError("singular probit Hessian", module="second_stage")
        scale = 1.0
        for _ in range(50):
            cand = theta + scale * step
            ll_new = probit_loglik(cand, y, design)
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        theta = theta + scale * step
        ll = probit_loglik(theta, y, design)
        # a diverging norm or an essentially perfect fit both mean the MLE
        # does not exist (separated data)
        if np.abs(theta).max() > SEPARATION_NORM or ll > -1e-8 * n:
            raise SeparationError("perfect separation: probit coefficients diverge",
                                  module="second_stage")
    lam, curv = probit_score_weights(theta, y, design)
    hess = (design * curv[:, None]).T @ design
    naive = np.linalg.inv(hess)
    d_x = d_x if d_x is not None else (k // 3 if k % 3 == 0 else 1)
    return SecondStageFit(
        params=SecondStageParams.from_theta(theta, d_x=d_x),
        method="pooled_probit", rho_work=0.0, naive_cov=naive,
        loglik_or_objective=ll, n_iter=it, converged=converged, d_x=d_x)


def predict_proba(design: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return norm_cdf(np.asarray(design) @ np.asarray(theta))


# ---------------------------------------------------------------------------
# GEE / MWNLS with exchangeable working correlation
# ---------------------------------------------------------------------------

def _as_units(a: np.ndarray, unit_index: np.ndarray):
    """Reshape flat NT arrays into (N, T, ...) using a balanced unit index."""
    unit_index = np.asarray(unit_index)
    n = int(unit_index.max()) + 1
    counts = np.bincount(unit_index, minlength=n)
    if counts.min() != counts.max():
        raise ShapeError("GEE requires a balanced panel", module="second_stage")
    T = int(counts[0])
    order = np.argsort(unit_index, kind="stable")
    if not np.array_equal(order, np.arange(unit_index.size)):
        a = a[order]
    return a.reshape((n, T) + a.shape[1:]), n, T


def estimate_working_correlation(y: np.ndarray, design: np.ndarray,
                                 theta_prelim: np.ndarray,
                                 unit_index: np.ndarray) -> float:
    """Moment estimator of the common within-unit correlation of standardized
    residuals, clamped so the exchangeable working matrix stays SPD."""
    theta = np.asarray(theta_prelim, dtype=float).ravel()
    m = np.clip(predict_proba(design, theta), PROB_FLOOR, 1.0 - PROB_FLOOR)
    e = (np.asarray(y, dtype=float).ravel() - m) / np.sqrt(m * (1.0 - m))
    e_units, n, T = _as_units(e, unit_index)
    tot = e_units.sum(axis=1)
    pair_sum = float(np.sum(tot * tot) - np.sum(e_units * e_units))
    rho = pair_sum / (n * T * (T - 1))
    lo = -1.0 / (T - 1) + 1e-6
    return float(np.clip(rho, lo, 1.0 - 1e-6))


def _exchangeable_inverse(rho: float, T: int):
    """Coefficients (a, b) with C(rho)^{-1} = a I + b E for the T x T
    exchangeable correlation matrix."""
    if not (-1.0 / (T - 1) < rho < 1.0):
        raise ClampError(f"exchangeable correlation {rho} outside SPD range",
                         module="second_stage")
    a = 1.0 / (1.0 - rho)
    b = -rho / ((1.0 - rho) * (1.0 + (T - 1) * rho))
    return a, b


def gee_objective(theta: np.ndarray, y_units, design_units, d_half, rho: float) -> float:
    idx = np.einsum("itk,k->it", design_units, theta)
    u = y_units - norm_cdf(idx)
    ut = u / d_half
    a, b = _exchangeable_inverse(rho, y_units.shape[1])
    tot = ut.sum(axis=1)
    return float(a * np.sum(ut * ut) + b * np.sum(tot * tot))


def fit_gee(y: np.ndarray, design: np.ndarray, unit_index: np.ndarray,
            max_outer: int = 2, max_inner: int = 50, tol_step: float = 1e-10,
            d_x: int | None = None) -> SecondStageFit:
    """MWNLS with exchangeable working correlation.

    Outer loop (twice): re-estimate rho and the diagonal variance at the
    current coefficients, then Gauss-Newton with the working covariance held
    fixed; step-halving keeps the objective non-increasing.
    """
    y = np.asarray(y, dtype=float).ravel()
    design = np.asarray(design, dtype=float)
    prelim = fit_pooled_probit(y, design, d_x=d_x)
    theta = prelim.theta.copy()
    y_units, n, T = _as_units(y, unit_index)
    design_units, _, _ = _as_units(design, unit_index)
    k = design.shape[1]
    rho = 0.0
    obj = np.inf
    it_total = 0
    converged = False
    for _ in range(max_outer):
        rho = estimate_working_correlation(y, design, theta, unit_index)
        m_fix = np.clip(norm_cdf(np.einsum("itk,k->it", design_units, theta)),
                        PROB_FLOOR, 1.0 - PROB_FLOOR)
        d_half = np.sqrt(m_fix * (1.0 - m_fix))
        a, b = _exchangeable_inverse(rho, T)
        obj = gee_objective(theta, y_units, design_units, d_half, rho)
        for _ in range(max_inner):
            it_total += 1
            idx = np.einsum("itk,k->it", design_units, theta)
            u = y_units - norm_cdf(idx)
            g = norm_pdf(idx)[:, :, None] * design_units / d_half[:, :, None]
            ut = u / d_half
            g_tot = g.sum(axis=1)
            u_tot = ut.sum(axis=1)
            rhs = a * np.einsum("itk,it->k", g, ut) + b * np.einsum("ik,i->k", g_tot, u_tot)
            lhs = (a * np.einsum("itk,itl->kl", g, g)
                   + b * np.einsum("ik,il->kl", g_tot, g_tot))
            try:
                step = np.linalg.solve(lhs, rhs)
            except np.linalg.LinAlgError:
                raise RankError("singular GEE system", module="second_stage")
            scale = 1.0
            improved = False
            for _ in range(40):
                cand = theta + scale * step
                obj_new = gee_objective(cand, y_units, design_units, d_half, rho)
                if obj_new <= obj + 1e-12:
                    improved = True
                    break
                scale *= 0.5
            if not improved:
                break
            theta = theta + scale * step
            moved = np.abs(scale * step).max()
            obj = obj_new
            if moved < tol_step:
                converged = True
                break
    # naive covariance from the final working-information matrix
    m_fix = np.clip(norm_cdf(np.einsum("itk,k->it", design_units, theta)),
                    PROB_FLOOR, 1.0 - PROB_FLOOR)
    d_half = np.sqrt(m_fix * (1.0 - m_fix))
    a, b = _exchangeable_inverse(rho, T)
    g = norm_pdf(np.einsum("itk,k->it", design_units, theta))[:, :, None] \
        * design_units / d_half[:, :, None]
    g_tot = g.sum(axis=1)
    info = a * np.einsum("itk,itl->kl", g, g) + b * np.einsum("ik,il->kl", g_tot, g_tot)
    naive = np.linalg.inv(info)
    dx = d_x if d_x is not None else (k // 3 if k % 3 == 0 else 1)
    return SecondStageFit(
        params=SecondStageParams.from_theta(theta, d_x=dx, rho_work=rho),
        method="gee", rho_work=rho, naive_cov=naive,
        loglik_or_objective=obj, n_iter=it_total, converged=converged, d_x=dx)


# ---------------------------------------------------------------------------
# linear model: CF regression vs pooled 2SLS (exact equivalence)
# ---------------------------------------------------------------------------

def _ols(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        raise RankError("rank-deficient linear design", module="second_stage")
    return coef


def pooled_2sls(y: np.ndarray, regressors: np.ndarray,
                instruments: np.ndarray) -> np.ndarray:
    """Two-stage least squares: project regressors on the instrument span,
    then OLS of y on the projections."""
    fitted = instruments @ np.linalg.lstsq(instruments, regressors, rcond=None)[0]
    return _ols(fitted, y)


@dataclass(frozen=True)
class LinearCfFit:
    coef_cf: np.ndarray      # coefficients on (x, pi_bar z̄, alpha_hat, eps_hat)
    phi_cf: np.ndarray       # x-block of coef_cf
    phi_iv: np.ndarray       # x-block of the pooled-2SLS estimate

    @property
    def max_abs_gap(self) -> float:
        return float(np.abs(self.phi_cf - self.phi_iv).max())


def fit_linear_cf(y_continuous: np.ndarray, data: PanelDataset,
                  cf: ControlFunctionSet, rf_params) -> LinearCfFit:
    """Pooled OLS of a continuous outcome on the CF-augmented design, plus the
    companion pooled 2SLS of y on (x, pi_bar z̄) with instruments
    (z_t - z̄, z̄); the x-coefficients agree exactly (no intercept).

    The CF design carries the unit-mean proxy pi_bar z̄ alongside
    (alpha_hat, eps_hat): the exact algebra annihilates the within and
    between residual blocks separately, which needs that column in the span.
    """
    n, T, m = data.n_units, data.periods, data.d_x
    y = np.asarray(y_continuous, dtype=float).reshape(n, T)
    y_flat = y.ravel()
    x_flat = data.X.reshape(n * T, m)
    alpha_rep = np.repeat(cf.alpha_hat[:, None, :], T, axis=1).reshape(n * T, m)
    eps_flat = cf.eps_hat.reshape(n * T, m)
    zbar_rep = np.repeat(data.z_bar[:, None, :], T, axis=1).reshape(n * T, data.d_z)
    z_flat = data.Z.reshape(n * T, data.d_z)
    proxy = zbar_rep @ rf_params.pi_bar.T
    if rf_params.intercept is not None:
        proxy = proxy + rf_params.intercept
    coef_cf = _ols(np.hstack([x_flat, proxy, alpha_rep, eps_flat]), y_flat)

    regressors = np.hstack([x_flat, proxy])
    instruments = np.hstack([z_flat - zbar_rep, zbar_rep])
    if rf_params.intercept is not None:
        instruments = np.hstack([instruments, np.ones((n * T, 1))])
    coef_iv = pooled_2sls(y_flat, regressors, instruments)
    return LinearCfFit(coef_cf=coef_cf, phi_cf=coef_cf[:m], phi_iv=coef_iv[:m])


def fit_linear_cf_within(y_continuous: np.ndarray, data: PanelDataset,
                         cf: ControlFunctionSet):
    """Within-transformed CF regression vs FE2SLS; returns (phi_cf_w, phi_fe2sls)."""
    n, T, m = data.n_units, data.periods, data.d_x
    y = np.asarray(y_continuous, dtype=float).reshape(n, T)
    y_dot = (y - y.mean(axis=1, keepdims=True)).ravel()
    x_dot = (data.X - data.X.mean(axis=1, keepdims=True)).reshape(n * T, m)
    z_dot = (data.Z - data.Z.mean(axis=1, keepdims=True)).reshape(n * T, data.d_z)
    eps_dot = (cf.eps_hat - cf.eps_hat.mean(axis=1, keepdims=True)).reshape(n * T, m)
    phi_cf_w = _ols(np.hstack([x_dot, eps_dot]), y_dot)[:m]
    phi_fe2sls = pooled_2sls(y_dot, x_dot, z_dot)
    return phi_cf_w, phi_fe2sls
