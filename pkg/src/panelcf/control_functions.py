"""Posterior means of the reduced-form heterogeneity terms.

The control functions are the conditional expectations of the unit effect and
the idiosyncratic errors given the full history (X, Z):

    alpha_hat_i  = E(alpha_i | X_i, Z_i)
                 = pi_bar z̄_i (+ c) + Omega Sigma^{-1} sum_t (x_it - pi z_it - pi_bar z̄_i - c)
    eps_hat_it   = x_it - pi z_it - alpha_hat_i,

with Omega = [T Sigma^{-1} + Lambda^{-1}]^{-1}.  Variants cover the scalar
non-spherical case and the random-coefficient reduced form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, RankError, ShapeError
from .numerics import SpdMatrix
from .panel import PanelDataset, ReducedFormParams


@dataclass(frozen=True)
class ControlFunctionSet:
    """Per-unit alpha_hat (N x d_x), per-observation eps_hat (N x T x d_x),
    posterior variance Omega, and the empirical-Bayes shrinkage matrix."""

    alpha_hat: np.ndarray
    eps_hat: np.ndarray
    omega: np.ndarray
    shrinkage: np.ndarray

    @property
    def d_x(self) -> int:
        return self.alpha_hat.shape[1]

    def pooled(self) -> np.ndarray:
        """NT x 2d_x matrix of (alpha_hat_i, eps_hat_it) rows, unit-major."""
        n, T, m = self.eps_hat.shape
        alpha = np.repeat(self.alpha_hat[:, None, :], T, axis=1)
        return np.concatenate([alpha, self.eps_hat], axis=2).reshape(n * T, 2 * m)


def compute_control_functions(data: PanelDataset, rf: ReducedFormParams) -> ControlFunctionSet:
    """Empirical-Bayes control functions at the plug-in parameter point."""
    if rf.d_x != data.d_x or rf.d_z != data.d_z:
        raise ShapeError(
            f"parameter dimensions ({rf.d_x}, {rf.d_z}) do not match data "
            f"({data.d_x}, {data.d_z})", module="control_functions")
    T = data.periods
    sigma = SpdMatrix(rf.sigma_eps, name="sigma_eps")
    lam = SpdMatrix(rf.lambda_alpha, name="lambda_alpha")
    sig_inv = sigma.inv()
    omega = SpdMatrix(T * sig_inv + lam.inv(), name="posterior precision").inv()
    prior_mean = rf.alpha_mean(data.z_bar)                       # N x m
    resid = data.X - np.einsum("itq,jq->itj", data.Z, rf.pi) - prior_mean[:, None, :]
    a_hat = resid.sum(axis=1) @ (omega @ sig_inv).T              # N x m
    alpha_hat = prior_mean + a_hat
    eps_hat = (data.X - np.einsum("itq,jq->itj", data.Z, rf.pi)
               - alpha_hat[:, None, :])
    shrink = np.linalg.solve(sig_inv + lam.inv() / T, sig_inv)
    return ControlFunctionSet(alpha_hat=alpha_hat, eps_hat=eps_hat,
                              omega=omega, shrinkage=shrink)


def compute_cf_scalar_nonspherical(data: PanelDataset, pi: np.ndarray,
                                   pi_bar: np.ndarray, omega_eps: np.ndarray,
                                   sigma2_alpha: float,
                                   intercept: float = 0.0) -> ControlFunctionSet:
    """Scalar-regressor control functions with serially dependent errors.

    With Var(eps_1..eps_T) = omega_eps (T x T SPD) and Var(a) = sigma2_alpha,
    the posterior mean of a is a weighted residual sum with weights
    omega_eps^{-1} e_T / (e_T' omega_eps^{-1} e_T + sigma_alpha^{-2}).
    """
    if data.d_x != 1:
        raise ShapeError("scalar non-spherical case requires d_x = 1",
                         module="control_functions")
    if sigma2_alpha <= 0:
        raise DomainError("sigma2_alpha must be positive", module="control_functions")
    T = data.periods
    ome = SpdMatrix(omega_eps, name="omega_eps")
    if ome.dim != T:
        raise ShapeError("omega_eps must be T x T", module="control_functions")
    ones = np.ones(T)
    oi_e = ome.solve(ones)
    denom = float(ones @ oi_e) + 1.0 / sigma2_alpha
    weights = oi_e / denom                                        # T-vector
    pi = np.asarray(pi, dtype=float).reshape(1, -1)
    pi_bar = np.asarray(pi_bar, dtype=float).reshape(1, -1)
    prior_mean = data.z_bar @ pi_bar.T + intercept                # N x 1
    resid = (data.X[:, :, 0] - data.Z @ pi[0] - prior_mean)       # N x T
    a_hat = resid @ weights
    alpha_hat = prior_mean[:, 0] + a_hat
    eps_hat = data.X[:, :, 0] - data.Z @ pi[0] - alpha_hat[:, None]
    post_var = np.array([[sigma2_alpha / (sigma2_alpha * float(ones @ oi_e) + 1.0)]])
    shrink = np.array([[float(ones @ oi_e) / denom]])
    return ControlFunctionSet(alpha_hat=alpha_hat[:, None],
                              eps_hat=eps_hat[:, :, None],
                              omega=post_var, shrinkage=shrink)


def compute_cf_random_coeff(data: PanelDataset, alpha_mean: np.ndarray,
                            sigma_a: np.ndarray, sigma2_eps: float):
    """Posterior means for the random-coefficient reduced form
    x_it = z_it' (alpha + a_i) + eps_it with a_i ~ N(0, sigma_a).

    Returns (a_hat, eps_hat): a_hat is N x d_z, eps_hat is N x T.
    """
    if data.d_x != 1:
        raise ShapeError("random-coefficient case requires d_x = 1",
                         module="control_functions")
    if sigma2_eps <= 0:
        raise DomainError("sigma2_eps must be positive", module="control_functions")
    alpha_mean = np.asarray(alpha_mean, dtype=float).reshape(-1)
    if alpha_mean.size != data.d_z:
        raise ShapeError("alpha_mean must be a d_z vector", module="control_functions")
    sa_inv = SpdMatrix(sigma_a, name="sigma_a").inv()
    resid = data.X[:, :, 0] - data.Z @ alpha_mean                 # N x T
    zz = np.einsum("itq,itr->iqr", data.Z, data.Z)                # N x q x q
    rhs = np.einsum("itq,it->iq", data.Z, resid)
    lhs = zz + sigma2_eps * sa_inv
    try:
        a_hat = np.linalg.solve(lhs, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise RankError("singular posterior system (should not happen for SPD "
                        "sigma_a and positive sigma2_eps)", module="control_functions")
    eps_hat = resid - np.einsum("itq,iq->it", data.Z, a_hat)
    return a_hat, eps_hat


def export_control_functions(data: PanelDataset, cf: ControlFunctionSet,
                             path: str) -> None:
    """Write the panel keys with appended CF columns
    (alpha_hat_1.., eps_hat_1..) for external replication."""
    import csv

    from .panel import fmt
    m = cf.d_x
    header = (["id", "t"] + [f"alpha_hat_{j + 1}" for j in range(m)]
              + [f"eps_hat_{j + 1}" for j in range(m)])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n_units):
            for t in range(data.periods):
                row = [str(data.unit_ids[i]), str(t + 1)]
                row += [fmt(v) for v in cf.alpha_hat[i]]
                row += [fmt(v) for v in cf.eps_hat[i, t]]
                writer.writerow(row)


def fe_limit_check(data: PanelDataset, rf: ReducedFormParams, t_grid) -> dict:
    """Mean distance between alpha_hat and the fixed-effects estimate
    (1/T) sum_t (x_t - pi z_t) when the panel is truncated to each T in
    ``t_grid``.  Used by the large-T consistency property tests."""
    out = {}
    for T in sorted(int(t) for t in t_grid):
        if T < 2 or T > data.periods:
            raise DomainError(f"T={T} outside [2, {data.periods}]",
                              module="control_functions")
        sub = PanelDataset(unit_ids=data.unit_ids, y=data.y[:, :T],
                           X=data.X[:, :T], Z=data.Z[:, :T], W=data.W[:, :T])
        cf = compute_control_functions(sub, rf)
        fe = (sub.X - np.einsum("itq,jq->itj", sub.Z, rf.pi)).mean(axis=1)
        out[T] = float(np.linalg.norm(cf.alpha_hat - fe, axis=1).mean())
    return out
