"""Two-step-corrected inference for the second-stage coefficients and APEs.

The sequential estimator stacks the first-stage likelihood score with the
second-stage weighted moment; the asymptotic covariance of the second-stage
coefficients is the GMM sandwich

    V2* = H22^-1 Vhh H22^-1'
        + H22^-1 H21 {L^-1 Vll L^-1'} H21' H22^-1'
        - H22^-1 {H21 L^-1 Vlh + Vhl L^-1' H21'} H22^-1',

with H21 the derivative of the second-stage moment through the control
functions.  ``v2_star`` is the covariance of sqrt(N) (theta2_hat - theta2*);
divide by N for finite-sample use.  APE standard errors follow by the delta
method and partially identified APEs get the uniform-coverage interval of
the Imbens-Manski construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from ._parallel import parallel_map
from .control_functions import ControlFunctionSet, compute_control_functions
from .effects import ApeEstimate, ape_point, asf_gradient
from .errors import DegenerateError, DomainError, PanelCFError
from .numerics import SpdMatrix, eigen_clip, norm_cdf, norm_pdf, norm_quantile
from .panel import PanelDataset
from .reduced_form import ReducedFormFit, design_z2, fit_stepwise
from .second_stage import (PROB_FLOOR, SecondStageFit, _exchangeable_inverse,
                           build_design, fit_gee, fit_pooled_probit)


@dataclass(frozen=True)
class TwoStepCovariance:
    v2_star: np.ndarray
    blocks: dict
    method: str                   # "analytic" | "bootstrap"
    n_units: int
    clipped: bool = False
    effective_b: int | None = None
    theta2_draws: np.ndarray | None = None
    ape_draws: np.ndarray | None = None

    @property
    def cov_theta2(self) -> np.ndarray:
        return self.v2_star / self.n_units

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_theta2))


# ---------------------------------------------------------------------------
# analytic blocks
# ---------------------------------------------------------------------------

def _design_derivative_pieces(data: PanelDataset, rf_fit: ReducedFormFit,
                              ss_fit: SecondStageFit, cf: ControlFunctionSet):
    """Per-observation derivative of the second-stage mean through Theta1.

    Returns (n x T x dim1) rows of Theta2' dX_it/dTheta1 before the phi(idx)
    factor; works in the same (delta, vech Sigma, vech Lambda) convention as
    the reduced-form score, symmetric pairs perturbed jointly.
    """
    layout = rf_fit.layout
    params = rf_fit.params
    N, T, m = data.n_units, data.periods, data.d_x
    sig_inv = SpdMatrix(params.sigma_eps, name="sigma_eps").inv()
    lam_inv = SpdMatrix(params.lambda_alpha, name="lambda_alpha").inv()
    omega = SpdMatrix(T * sig_inv + lam_inv, name="posterior precision").inv()
    a_mat = omega @ sig_inv

    z2 = design_z2(data, layout.intercept)
    z2_bar = z2.mean(axis=1)
    mask = np.zeros(layout.q)
    mask[data.d_z:] = 1.0
    mean_rows = z2_bar * mask                                  # N x q

    prior_mean = params.alpha_mean(data.z_bar)
    resid = (data.X - np.einsum("itq,jq->itj", data.Z, params.pi)
             - prior_mean[:, None, :])
    s_vec = resid.sum(axis=1)                                  # N x m
    a_hat = s_vec @ a_mat.T

    phi_a = ss_fit.params.phi_alpha
    phi_e = ss_fit.params.phi_eps
    c_vec = a_mat.T @ (phi_e - phi_a)                          # m

    # delta part: segment l of row (i,t) is
    #   phi_a[l]*mean_rows_i - phi_e[l]*z2_it + T*c[l]*z̄2_i
    d_delta = (phi_a[None, None, :, None] * mean_rows[:, None, None, :]
               - phi_e[None, None, :, None] * z2[:, :, None, :]
               + T * c_vec[None, None, :, None] * z2_bar[:, None, None, :])
    d_delta = d_delta.reshape(N, T, layout.p)

    diff = phi_a - phi_e
    ts_minus_s = T * a_hat - s_vec                             # N x m
    cols_sig = []
    cols_lam = []
    for a in range(layout.n_vech):
        e_a = layout.sym_unit(a)
        v_sig = sig_inv @ e_a @ sig_inv @ omega @ diff
        v_lam = lam_inv @ e_a @ lam_inv @ omega @ diff
        cols_sig.append(ts_minus_s @ v_sig)
        cols_lam.append(a_hat @ v_lam)
    d_sig = np.stack(cols_sig, axis=1)                         # N x n_vech
    d_lam = np.stack(cols_lam, axis=1)
    d_cov = np.concatenate([d_sig, d_lam], axis=1)[:, None, :].repeat(T, axis=1)
    return np.concatenate([d_delta, d_cov], axis=2)


def stage2_moment_derivatives(data: PanelDataset, rf_fit: ReducedFormFit,
                              ss_fit: SecondStageFit,
                              cf: ControlFunctionSet | None = None) -> dict:
    """Sample analogs of the moment-derivative and outer-product blocks."""
    if cf is None:
        cf = compute_control_functions(data, rf_fit.params)
    N, T = data.n_units, data.periods
    design = build_design(data, cf)
    k = design.shape[1]
    theta = ss_fit.theta
    idx = (design @ theta).reshape(N, T)
    mprob = np.clip(norm_cdf(idx), PROB_FLOOR, 1.0 - PROB_FLOOR)
    dens = norm_pdf(idx)
    u = data.y - mprob
    d_half = np.sqrt(mprob * (1.0 - mprob))
    a_co, b_co = _exchangeable_inverse(ss_fit.rho_work, T)

    grad2 = dens[:, :, None] * design.reshape(N, T, k)         # d m / d theta2
    grad1 = dens[:, :, None] * _design_derivative_pieces(data, rf_fit, ss_fit, cf)

    g2 = grad2 / d_half[:, :, None]
    g1 = grad1 / d_half[:, :, None]
    ut = u / d_half
    g2_tot = g2.sum(axis=1)
    g1_tot = g1.sum(axis=1)
    u_tot = ut.sum(axis=1)

    h_units = -(a_co * np.einsum("itk,it->ik", g2, ut)
                + b_co * g2_tot * u_tot[:, None])
    h22 = (a_co * np.einsum("itk,itl->kl", g2, g2)
           + b_co * np.einsum("ik,il->kl", g2_tot, g2_tot)) / N
    h21 = (a_co * np.einsum("itk,itd->kd", g2, g1)
           + b_co * np.einsum("ik,id->kd", g2_tot, g1_tot)) / N

    scores1 = rf_fit.per_unit_scores
    return {
        "H_units": h_units,
        "H22": h22,
        "H21": h21,
        "V_HH": h_units.T @ h_units / N,
        "L11": rf_fit.hessian / N,
        "V_LL": scores1.T @ scores1 / N,
        "V_LH": scores1.T @ h_units / N,
    }


def v2_star(data: PanelDataset, rf_fit: ReducedFormFit, ss_fit: SecondStageFit,
            cf: ControlFunctionSet | None = None,
            first_stage: bool = True) -> TwoStepCovariance:
    """Assemble the two-step sandwich; ``first_stage=False`` treats Theta1 as
    known and reduces to H22^-1 V_HH H22^-1."""
    blocks = stage2_moment_derivatives(data, rf_fit, ss_fit, cf=cf)
    h22_inv = np.linalg.inv(blocks["H22"])
    v = h22_inv @ blocks["V_HH"] @ h22_inv.T
    if first_stage:
        mid = blocks["H21"] @ np.linalg.inv(blocks["L11"])
        v = v + h22_inv @ (mid @ blocks["V_LL"] @ mid.T) @ h22_inv.T
        cross = mid @ blocks["V_LH"]
        v = v - h22_inv @ (cross + cross.T) @ h22_inv.T
    v = 0.5 * (v + v.T)
    clipped = False
    w = np.linalg.eigvalsh(v)
    if w.min() < 0:
        if w.min() < -1e-8 * max(w.max(), 1.0):
            warnings.warn("two-step covariance clipped to PSD "
                          f"(min eigenvalue {w.min():.3e})")
        v = eigen_clip(v, floor=0.0)
        clipped = True
    return TwoStepCovariance(v2_star=v, blocks=blocks, method="analytic",
                             n_units=data.n_units, clipped=clipped)


# ---------------------------------------------------------------------------
# APE standard errors and interval construction
# ---------------------------------------------------------------------------

def ape_se_delta(fit: SecondStageFit, cov: TwoStepCovariance,
                 cf: ControlFunctionSet, estimate: ApeEstimate,
                 data: PanelDataset | None = None) -> float:
    """Delta-method standard error of the APE, normalized by sqrt(NT).

    The gradient differences the trimmed-ASF gradients at the two evaluation
    points; the trimmed shares do not depend on Theta2, so the upper and
    lower bound share this sigma_bar exactly.
    """
    x_shift = estimate.x_bar.copy()
    x_shift[estimate.k] += estimate.delta_k
    g = (asf_gradient(fit, cf, x_shift, data=data, mask=estimate.mask_delta)
         - asf_gradient(fit, cf, estimate.x_bar, data=data, mask=estimate.mask_xbar))
    g = g / estimate.delta_k
    nt = cf.eps_hat.shape[0] * cf.eps_hat.shape[1]
    var_ape = float(g @ cov.cov_theta2 @ g)
    return float(np.sqrt(max(var_ape, 0.0) * nt))


def imbens_manski_ci(psi_l: float, psi_u: float, sigma_bar: float, n_obs: int,
                     level: float = 0.95):
    """Interval [psi_l - C sigma/sqrt(NT), psi_u + C sigma/sqrt(NT)] with C
    solving Phi(C + sqrt(NT)(psi_u - psi_l)/sigma) - Phi(-C) = level, found
    by bisection on [0, 5] to 1e-10.  Returns (low, high, C)."""
    if sigma_bar <= 0:
        raise DomainError("sigma_bar must be positive", module="inference")
    if psi_l > psi_u + 1e-12:
        raise DomainError("psi_l > psi_u", module="inference")
    if not (0.0 < level < 1.0):
        raise DomainError("level must lie in (0, 1)", module="inference")
    gap = np.sqrt(n_obs) * (psi_u - psi_l) / sigma_bar

    def f(c):
        return norm_cdf(c + gap) - norm_cdf(-c) - level

    lo, hi = 0.0, 5.0
    if f(hi) < 0:
        raise DomainError("no Imbens-Manski root in [0, 5]", module="inference")
    for _ in range(200):
        midpoint = 0.5 * (lo + hi)
        if hi - lo < 1e-10:
            break
        if f(midpoint) < 0:
            lo = midpoint
        else:
            hi = midpoint
    c = 0.5 * (lo + hi)
    half = c * sigma_bar / np.sqrt(n_obs)
    return psi_l - half, psi_u + half, c


def attach_inference(estimate: ApeEstimate, fit: SecondStageFit,
                     cov: TwoStepCovariance, cf: ControlFunctionSet,
                     data: PanelDataset | None = None,
                     level: float = 0.95) -> ApeEstimate:
    """Return a copy of the estimate with sigma_bar and its CI filled in:
    symmetric normal CI for point APEs, Imbens-Manski for bounds."""
    sigma = ape_se_delta(fit, cov, cf, estimate, data=data)
    nt = cf.eps_hat.shape[0] * cf.eps_hat.shape[1]
    if estimate.kind == "point" or sigma == 0.0:
        z = float(norm_quantile(0.5 + level / 2.0))
        half = z * sigma / np.sqrt(nt)
        ci = (estimate.psi_l - half, estimate.psi_u + half)
    else:
        lo, hi, _ = imbens_manski_ci(estimate.psi_l, estimate.psi_u, sigma,
                                     nt, level=level)
        ci = (lo, hi)
    return replace(estimate, sigma_bar=sigma, ci=ci)


# ---------------------------------------------------------------------------
# unit bootstrap
# ---------------------------------------------------------------------------

def _bootstrap_replicate(data: PanelDataset, entropy, method: str,
                         rf_intercept: bool, ape_points: tuple):
    rng = np.random.default_rng(entropy)
    take = rng.integers(0, data.n_units, size=data.n_units)
    sample = PanelDataset(unit_ids=np.arange(data.n_units),
                          y=data.y[take], X=data.X[take],
                          Z=data.Z[take], W=data.W[take])
    try:
        rf = fit_stepwise(sample, intercept=rf_intercept)
        cf = compute_control_functions(sample, rf.params)
        design = build_design(sample, cf)
        y = sample.y.ravel()
        if method == "gee":
            unit_index = np.repeat(np.arange(sample.n_units), sample.periods)
            ss = fit_gee(y, design, unit_index, d_x=sample.d_x)
        else:
            ss = fit_pooled_probit(y, design, d_x=sample.d_x)
        if not (rf.converged and ss.converged):
            return None
        apes = [ape_point(ss, cf, x_bar, k, delta, data=sample).psi_l
                for (x_bar, k, delta) in ape_points]
        return ss.theta, np.array(apes)
    except PanelCFError:
        return None


def bootstrap_two_step(data: PanelDataset, B: int, seed: int,
                       method: str = "pooled_probit", rf_intercept: bool = True,
                       ape_points: tuple = (), threads: int | None = None
                       ) -> TwoStepCovariance:
    """Resample units with replacement and rerun both estimation steps.

    Per-replicate RNG streams are spawned from the master seed, so results
    are bit-identical for any worker count.  Non-converged replicates are
    dropped and reported through ``effective_b``.
    """
    if B < 1:
        raise DomainError("B must be >= 1", module="inference")
    children = np.random.SeedSequence(seed).spawn(B)
    args = [(data, children[b], method, rf_intercept, tuple(ape_points))
            for b in range(B)]
    results = parallel_map(_bootstrap_replicate, args, threads=threads)
    kept = [r for r in results if r is not None]
    if len(kept) < 2:
        raise DegenerateError(
            f"bootstrap kept {len(kept)} of {B} replicates; cannot form a covariance",
            module="inference")
    draws = np.stack([r[0] for r in kept])
    apes = np.stack([r[1] for r in kept]) if ape_points else None
    centered = draws - draws.mean(axis=0)
    cov = centered.T @ centered / (len(kept) - 1)
    if np.allclose(centered, 0.0):
        cov = np.zeros_like(cov)
    return TwoStepCovariance(v2_star=data.n_units * cov, blocks={},
                             method="bootstrap", n_units=data.n_units,
                             effective_b=len(kept), theta2_draws=draws,
                             ape_draws=apes)


def percentile_ci(draws: np.ndarray, level: float = 0.95):
    lo = float(np.quantile(draws, (1.0 - level) / 2.0))
    hi = float(np.quantile(draws, 1.0 - (1.0 - level) / 2.0))
    return lo, hi
