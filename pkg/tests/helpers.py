"""Shared oracles for the test suite.

Everything here is deliberately independent of the library's computational
paths: posterior means via brute multivariate-normal conditioning, GLS via a
dense stacked system, a standalone logit fit, and small fixture builders.
"""

import numpy as np

from panelcf.panel import PanelDataset


def rng_for(seed):
    return np.random.default_rng(seed)


def random_spd(rng, dim, ridge=0.5):
    a = rng.normal(size=(dim, dim))
    return a @ a.T + ridge * np.eye(dim)


def mvn_conditional_mean(cov_ax, cov_xx, centered_x):
    """E(a | X) = Cov(a, X) Var(X)^-1 (X - E X) for jointly normal (a, X)."""
    return cov_ax @ np.linalg.solve(cov_xx, centered_x)


def make_panel(rng, n, T, d_x, d_z, pi=None, pi_bar=None, lam_chol=None,
               sigma_chol=None):
    """Random-effects panel with known latent pieces; binary y is irrelevant
    filler for first-stage tests."""
    z = rng.normal(size=(n, T, d_z))
    pi = rng.normal(size=(d_x, d_z)) if pi is None else np.asarray(pi, dtype=float)
    pi_bar = (rng.normal(size=(d_x, d_z)) if pi_bar is None
              else np.asarray(pi_bar, dtype=float))
    a = rng.normal(size=(n, d_x))
    if lam_chol is not None:
        a = a @ lam_chol.T
    eps = rng.normal(size=(n, T, d_x))
    if sigma_chol is not None:
        eps = eps @ sigma_chol.T
    alpha = z.mean(axis=1) @ pi_bar.T + a
    x = np.einsum("itq,jq->itj", z, pi) + alpha[:, None, :] + eps
    y = (rng.random((n, T)) < 0.5).astype(float)
    data = PanelDataset(unit_ids=np.arange(n), y=y, X=x, Z=z,
                        W=np.zeros((n, T, 0)))
    return data, {"pi": pi, "pi_bar": pi_bar, "a": a, "eps": eps, "alpha": alpha}


def dense_gls_delta(data, sigma, lam, intercept=True):
    """Stacked-system GLS oracle: build each unit's mT x p design and the
    dense Omega_u^-1, then solve the normal equations directly."""
    n, T, m = data.n_units, data.periods, data.d_x
    zbar = data.z_bar
    q = 2 * data.d_z + (1 if intercept else 0)
    p = m * q
    s_T = sigma + T * lam
    om_inv = (np.kron(np.eye(T) - np.ones((T, T)) / T, np.linalg.inv(sigma))
              + np.kron(np.ones((T, T)) / T, np.linalg.inv(s_T)))
    lhs = np.zeros((p, p))
    rhs = np.zeros(p)
    for i in range(n):
        design = np.zeros((T * m, p))
        for t in range(T):
            row = np.concatenate([data.Z[i, t], zbar[i],
                                  [1.0] if intercept else []])
            for j in range(m):
                design[t * m + j, j * q:(j + 1) * q] = row
        xi = data.X[i].reshape(T * m)
        lhs += design.T @ om_inv @ design
        rhs += design.T @ om_inv @ xi
    return np.linalg.solve(lhs, rhs)


def fit_logit(x, y, max_iter=200):
    """Plain Newton logit MLE (oracle for the T=2 conditional-logit check)."""
    x = np.atleast_2d(x)
    if x.shape[0] != y.size:
        x = x.T
    beta = np.zeros(x.shape[1])
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(x @ beta)))
        g = x.T @ (y - p)
        h = (x * (p * (1 - p))[:, None]).T @ x
        step = np.linalg.solve(h, g)
        beta = beta + step
        if np.abs(step).max() < 1e-12:
            break
    return beta


def max_rel_err(analytic, reference):
    analytic = np.asarray(analytic, dtype=float)
    reference = np.asarray(reference, dtype=float)
    scale = max(float(np.abs(reference).max()), 1e-12)
    return float(np.abs(analytic - reference).max() / scale)
