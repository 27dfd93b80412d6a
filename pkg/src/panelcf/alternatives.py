"""Comparison estimators for the Monte Carlo study.

Three alternatives share the AltFit container: the two-step control-function
probit with a pooled-OLS first stage and composite residual (PW), the
correlated-random-effects pooled probit with unit means of x (CRE), and the
conditional logit that eliminates the unit effect by conditioning on the
within-unit outcome sum (CL).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import (DegenerateError, RankError, ShapeError, UnsupportedError)
from .numerics import norm_cdf
from .panel import PanelDataset
from .second_stage import fit_pooled_probit


@dataclass(frozen=True)
class AltFit:
    kind: str                 # "pw" | "cre_probit" | "cond_logit"
    coefficients: np.ndarray
    aux: dict


# ---------------------------------------------------------------------------
# Papke-Wooldridge style control function
# ---------------------------------------------------------------------------

def fit_pw(data: PanelDataset, cf_mode: str = "nu", intercept: bool = True) -> AltFit:
    """Two-step pooled estimator with the composite first-stage residual.

    Stage 1: pooled OLS of x on (1, z, z̄) giving residuals v_it.  Stage 2:
    pooled probit of y on (1, x, z̄, CF) where CF is either the
    contemporaneous residual v_it (``cf_mode="nu"``) or the full residual
    history (v_i1..v_iT) (``cf_mode="V"``).
    """
    if data.d_x != 1:
        raise ShapeError("the PW estimator handles a single endogenous regressor",
                         module="alternative_estimators")
    if cf_mode not in ("nu", "V"):
        raise UnsupportedError(f"unknown cf_mode {cf_mode!r}", module="alternative_estimators")
    n, T, dz = data.n_units, data.periods, data.d_z
    nt = n * T
    x = data.X[:, :, 0].reshape(nt)
    z = data.Z.reshape(nt, dz)
    zbar = np.repeat(data.z_bar[:, None, :], T, axis=1).reshape(nt, dz)
    stage1 = np.hstack([z, zbar])
    if intercept:
        stage1 = np.hstack([np.ones((nt, 1)), stage1])
    coef1, _, rank, _ = np.linalg.lstsq(stage1, x, rcond=None)
    if rank < stage1.shape[1]:
        raise RankError("rank-deficient PW first stage", module="alternative_estimators")
    resid = (x - stage1 @ coef1).reshape(n, T)

    if cf_mode == "nu":
        cf_cols = resid.reshape(nt, 1)
    else:
        cf_cols = np.repeat(resid[:, None, :], T, axis=1).reshape(nt, T)
    design = [data.X.reshape(nt, 1), zbar, cf_cols]
    if intercept:
        design.insert(0, np.ones((nt, 1)))
    design = np.hstack(design)
    probit = fit_pooled_probit(data.y.reshape(nt), design, d_x=1)
    # Scale of the composite error tau + zeta given the contemporaneous
    # residual: the probit normalizes the conditional variance to one, and the
    # unit-effect part is proxied by the spread of the first-stage per-unit
    # effects x̄_i - pi z̄_i.  The APE hook divides the index by this scale.
    # The residual-history variant conditions on the whole of V, where the
    # plain partial mean applies (scale 1).
    z_slopes = coef1[1: 1 + dz] if intercept else coef1[:dz]
    alpha_fe = (data.X[:, :, 0] - data.Z @ z_slopes).mean(axis=1)
    sigma_pw = float(np.sqrt(1.0 + alpha_fe.var(ddof=1))) if cf_mode == "nu" else 1.0
    return AltFit(kind="pw", coefficients=probit.theta,
                  aux={"resid": resid, "cf_mode": cf_mode, "intercept": intercept,
                       "stage1_coef": coef1, "design": design, "sigma_pw": sigma_pw,
                       "x_col": 1 if intercept else 0})


# ---------------------------------------------------------------------------
# Chamberlain-style CRE pooled probit
# ---------------------------------------------------------------------------

def fit_cre_probit(data: PanelDataset, intercept: bool = True) -> AltFit:
    """Pooled probit of y on (1, x, x̄_i): the Mundlak device applied to x."""
    n, T, m = data.n_units, data.periods, data.d_x
    nt = n * T
    x = data.X.reshape(nt, m)
    x_bar_unit = data.X.mean(axis=1)
    xbar = np.repeat(x_bar_unit[:, None, :], T, axis=1).reshape(nt, m)
    design = [x, xbar]
    if intercept:
        design.insert(0, np.ones((nt, 1)))
    design = np.hstack(design)
    probit = fit_pooled_probit(data.y.reshape(nt), design, d_x=m)
    return AltFit(kind="cre_probit", coefficients=probit.theta,
                  aux={"x_bar": x_bar_unit, "intercept": intercept, "design": design,
                       "x_cols": slice(1, 1 + m) if intercept else slice(0, m)})


# ---------------------------------------------------------------------------
# Chamberlain conditional logit
# ---------------------------------------------------------------------------

def _informative_groups(data: PanelDataset):
    """Units with 0 < sum_t y_it < T, grouped by the outcome sum."""
    s = data.y.sum(axis=1).astype(int)
    T = data.periods
    groups = {}
    for total in range(1, T):
        members = np.flatnonzero(s == total)
        if members.size:
            rows = []
            for picks in combinations(range(T), total):
                row = np.zeros(T)
                row[list(picks)] = 1.0
                rows.append(row)
            groups[total] = (members, np.stack(rows))
    return groups


def cond_logit_loglik_parts(phi: np.ndarray, data: PanelDataset, groups):
    """Conditional log-likelihood, gradient, and Hessian over informative units."""
    m = data.d_x
    ll = 0.0
    grad = np.zeros(m)
    hess = np.zeros((m, m))
    for total, (members, combos) in groups.items():
        Xg = data.X[members]                                       # u x T x m
        yg = data.y[members]
        seq_x = np.einsum("dt,utm->udm", combos, Xg)               # u x d x m
        logits = seq_x @ phi                                       # u x d
        obs = np.einsum("ut,utm->um", yg, Xg) @ phi
        shift = logits.max(axis=1, keepdims=True)
        lse = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
        ll += float(obs.sum() - lse.sum())
        p = np.exp(logits - lse[:, None])                          # u x d
        mean_vec = np.einsum("ud,udm->um", p, seq_x)
        grad += np.einsum("ut,utm->m", yg, Xg) - mean_vec.sum(axis=0)
        second = np.einsum("ud,udm,udk->mk", p, seq_x, seq_x)
        hess -= second - np.einsum("um,uk->mk", mean_vec, mean_vec)
    return ll, grad, hess


def fit_cond_logit(data: PanelDataset, max_iter: int = 100,
                   tol_grad: float = 1e-9) -> AltFit:
    """Maximize the conditional likelihood given the within-unit outcome sums,
    enumerating the outcome sequences exactly (T <= 10)."""
    if data.periods > 10:
        raise UnsupportedError("conditional-logit enumeration limited to T <= 10",
                               module="alternative_estimators")
    groups = _informative_groups(data)
    if not groups:
        raise DegenerateError("no informative units (all outcome sums are 0 or T)",
                              module="alternative_estimators")
    m = data.d_x
    phi = np.zeros(m)
    ll, grad, hess = cond_logit_loglik_parts(phi, data, groups)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        if np.abs(grad).max() < tol_grad * max(1.0, data.n_units / 1000.0):
            converged = True
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise RankError("singular conditional-logit Hessian",
                            module="alternative_estimators")
        scale = 1.0
        for _ in range(50):
            cand = phi + scale * step
            ll_new, g_new, h_new = cond_logit_loglik_parts(cand, data, groups)
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        phi, ll, grad, hess = cand, ll_new, g_new, h_new
    n_informative = sum(len(mem) for mem, _ in groups.values())
    return AltFit(kind="cond_logit", coefficients=phi,
                  aux={"loglik": ll, "n_informative": n_informative,
                       "converged": converged, "n_iter": it})


# ---------------------------------------------------------------------------
# APE hooks
# ---------------------------------------------------------------------------

def _logistic(v):
    return 1.0 / (1.0 + np.exp(-v))


def ape_alt(fit: AltFit, data: PanelDataset, x_bar, k: int, delta_k: float,
            theta_draws: np.ndarray | None = None) -> float:
    """Finite-difference APE at x̄ for a fitted alternative estimator.

    PW and CRE average the fitted probit over the empirical distribution of
    their conditioning variables; CL averages the logistic response over the
    true unit effects, which exist only in simulation (hence
    ``theta_draws``); on real data CL has no APE and raises.
    """
    x_bar = np.asarray(x_bar, dtype=float).reshape(-1)
    if fit.kind == "pw":
        design = fit.aux["design"].copy()
        col = fit.aux["x_col"]
        scale = fit.aux["sigma_pw"]

        def mean_prob(val):
            design[:, col] = val
            return float(norm_cdf(design @ fit.coefficients / scale).mean())

        return (mean_prob(x_bar[0] + delta_k) - mean_prob(x_bar[0])) / delta_k
    if fit.kind == "cre_probit":
        design = fit.aux["design"].copy()
        cols = fit.aux["x_cols"]

        def mean_prob(vec):
            design[:, cols] = vec
            return float(norm_cdf(design @ fit.coefficients).mean())

        shifted = x_bar.copy()
        shifted[k] += delta_k
        return (mean_prob(shifted) - mean_prob(x_bar)) / delta_k
    if fit.kind == "cond_logit":
        if theta_draws is None:
            raise UnsupportedError(
                "conditional-logit APE needs the true unit effects; available "
                "only under the simulation protocol", module="alternative_estimators")
        shifted = x_bar.copy()
        shifted[k] += delta_k
        base = _logistic(float(x_bar @ fit.coefficients) + theta_draws)
        moved = _logistic(float(shifted @ fit.coefficients) + theta_draws)
        return float((moved.mean() - base.mean()) / delta_k)
    raise UnsupportedError(f"unknown estimator kind {fit.kind!r}",
                           module="alternative_estimators")
