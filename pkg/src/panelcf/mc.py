"""Monte Carlo harness: DGP generation, estimator comparison, APE tables.

Two preset designs: a one-regressor triangular system with a binary
instrument (table1) and a two-regressor system with two binary instruments
(table2).  The instruments, unit effects, and the structural effect are drawn
jointly normal with correlations chosen so that the structural effect is
conditionally uncorrelated with the instruments given the unit effects; the
idiosyncratic pairs are drawn independently per observation; instruments are
discretized after drawing.  The latent draws are kept so every replication
can evaluate the realized true APE and the conditional-logit APE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import parallel_map
from .alternatives import ape_alt, fit_cond_logit, fit_cre_probit, fit_pw
from .control_functions import compute_control_functions
from .effects import ape_point
from .errors import ConfigError, PanelCFError, UnsupportedError
from .mc_defaults import *  # noqa: F401,F403  (preset parameter tables)
from .numerics import sample_mvn
from .panel import PanelDataset
from .reduced_form import fit_stepwise
from .second_stage import build_design, fit_gee, fit_pooled_probit


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of the triangular-system DGP; all correlation blocks are in
    correlation units, scales separate, so presets stay readable."""

    n_units: int
    periods: int = 5
    phi: tuple = (-1.0,)
    pi: tuple = ((1.5,),)
    sigma_z: tuple = (5.0,)
    corr_z: tuple = ((1.0,),)
    sigma_alpha: tuple = (3.0,)
    corr_z_alpha: tuple = ((0.4,),)
    sigma_theta: float = 4.0
    corr_z_theta: tuple = (0.2,)
    corr_alpha: tuple = ((1.0,),)
    corr_alpha_theta: tuple = (0.5,)
    sigma_zeta: float = 1.0
    sigma_eps: tuple = (1.0,)
    corr_zeta_eps: tuple = (0.75,)
    corr_eps: tuple = ((1.0,),)
    discretize: tuple = (0.0,)      # per-instrument threshold, None = continuous

    @property
    def d_x(self) -> int:
        return len(self.phi)

    @property
    def d_z(self) -> int:
        return len(self.sigma_z)

    def joint_cov(self) -> np.ndarray:
        """Covariance of (z_11..z_Tdz, alpha_1..alpha_dx, theta)."""
        T, dz, dx = self.periods, self.d_z, self.d_x
        dim = T * dz + dx + 1
        corr = np.eye(dim)
        cz = np.asarray(self.corr_z)
        cza = np.asarray(self.corr_z_alpha).reshape(dz, dx)
        czt = np.asarray(self.corr_z_theta).reshape(dz)
        ca = np.asarray(self.corr_alpha)
        cat = np.asarray(self.corr_alpha_theta).reshape(dx)
        for t in range(T):
            sl = slice(t * dz, (t + 1) * dz)
            corr[sl, sl] = cz
            corr[sl, T * dz: T * dz + dx] = cza
            corr[T * dz: T * dz + dx, sl] = cza.T
            corr[sl, -1] = czt
            corr[-1, sl] = czt
        corr[T * dz: T * dz + dx, T * dz: T * dz + dx] = ca
        corr[T * dz: T * dz + dx, -1] = cat
        corr[-1, T * dz: T * dz + dx] = cat
        scale = np.concatenate([np.tile(self.sigma_z, T), self.sigma_alpha,
                                [self.sigma_theta]])
        cov = corr * np.outer(scale, scale)
        w = np.linalg.eigvalsh(cov)
        if w.min() < -1e-10 * max(w.max(), 1.0):
            raise ConfigError("joint covariance of (Z, alpha, theta) is not PSD; "
                              f"eigenvalues: {np.array2string(w, precision=4)}",
                              module="mc_harness")
        return cov

    def idio_cov(self) -> np.ndarray:
        """Covariance of (zeta, eps_1..eps_dx)."""
        dx = self.d_x
        corr = np.eye(dx + 1)
        corr[0, 1:] = np.asarray(self.corr_zeta_eps)
        corr[1:, 0] = np.asarray(self.corr_zeta_eps)
        corr[1:, 1:] = np.asarray(self.corr_eps)
        scale = np.concatenate([[self.sigma_zeta], self.sigma_eps])
        cov = corr * np.outer(scale, scale)
        w = np.linalg.eigvalsh(cov)
        if w.min() < -1e-10 * max(w.max(), 1.0):
            raise ConfigError("idiosyncratic covariance is not PSD; eigenvalues: "
                              f"{np.array2string(w, precision=4)}", module="mc_harness")
        return cov


@dataclass(frozen=True)
class LatentTruth:
    alpha: np.ndarray    # N x d_x
    theta: np.ndarray    # N
    zeta: np.ndarray     # N x T
    eps: np.ndarray      # N x T x d_x


def dgp_table1(n_units: int, discretize: bool = True) -> DgpSpec:
    """One-regressor design of the comparison study; binary instrument by
    default, continuous when ``discretize=False``."""
    return DgpSpec(n_units=n_units,
                   discretize=(0.0,) if discretize else (None,))


def dgp_table2(n_units: int) -> DgpSpec:
    """Two-regressor design with two binary instruments.

    Effect scales and the orientation of the idiosyncratic correlations are
    calibrated against the published comparison table (see mc_defaults).
    """
    return DgpSpec(
        n_units=n_units,
        phi=(-1.0, 0.5),
        pi=((-1.0, 0.05), (0.025, 0.75)),
        sigma_z=(5.0, 2.0),
        corr_z=((1.0, 0.25), (0.25, 1.0)),
        sigma_alpha=TABLE2_SIGMA_ALPHA,
        corr_z_alpha=((0.2, 0.25), (0.3, 0.3)),
        sigma_theta=TABLE2_SIGMA_THETA,
        corr_z_theta=(0.1, 0.15),
        corr_alpha=((1.0, 0.5), (0.5, 1.0)),
        corr_alpha_theta=(0.5, 0.25),
        sigma_eps=(1.0, 1.0),
        corr_zeta_eps=TABLE2_CORR_ZETA_EPS,
        corr_eps=((1.0, 0.5), (0.5, 1.0)),
        discretize=(0.0, 1.0))


DEFAULT_EVAL = {1: (np.array([1.0]), np.array([0.05])),
                2: (np.array([0.5, 1.0]), np.array([0.05, 0.1]))}


def generate(dgp: DgpSpec, seed):
    """Draw one replication; returns (PanelDataset, LatentTruth)."""
    rng = np.random.default_rng(seed)
    N, T, dz, dx = dgp.n_units, dgp.periods, dgp.d_z, dgp.d_x
    joint = sample_mvn(rng, dgp.joint_cov(), N)
    z = joint[:, : T * dz].reshape(N, T, dz)
    alpha = joint[:, T * dz: T * dz + dx]
    theta = joint[:, -1]
    idio = sample_mvn(rng, dgp.idio_cov(), N * T).reshape(N, T, dx + 1)
    zeta = idio[:, :, 0]
    eps = idio[:, :, 1:]
    for j, thresh in enumerate(dgp.discretize):
        if thresh is not None:
            z[:, :, j] = (z[:, :, j] >= thresh).astype(float)
    pi = np.asarray(dgp.pi, dtype=float).reshape(dx, dz)
    x = np.einsum("itq,jq->itj", z, pi) + alpha[:, None, :] + eps
    y = (x @ np.asarray(dgp.phi) + theta[:, None] + zeta > 0.0).astype(float)
    data = PanelDataset(unit_ids=np.arange(N), y=y, X=x, Z=z,
                        W=np.zeros((N, T, 0)))
    return data, LatentTruth(alpha=alpha, theta=theta, zeta=zeta, eps=eps)


def true_ape(truth: LatentTruth, phi, x_bar, k: int, delta_k: float) -> float:
    """Realized true APE: difference of indicator means over the latent draws."""
    phi = np.asarray(phi, dtype=float)
    x_bar = np.asarray(x_bar, dtype=float).reshape(-1)
    shifted = x_bar.copy()
    shifted[k] += delta_k
    err = truth.theta[:, None] + truth.zeta

    def g(v):
        return float((float(v @ phi) + err > 0.0).mean())

    return (g(shifted) - g(x_bar)) / delta_k


# ---------------------------------------------------------------------------
# per-replication estimation
# ---------------------------------------------------------------------------

KNOWN_ESTIMATORS = ("crecf", "crecf_gee", "pw", "pw_v", "cre", "cl")


def estimate_apes(name: str, data: PanelDataset, truth: LatentTruth | None,
                  x_bar: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """APE per coordinate k for one estimator on one replication."""
    dx = data.d_x
    out = np.empty(len(deltas))
    if name in ("crecf", "crecf_gee"):
        rf = fit_stepwise(data, intercept=True)
        cf = compute_control_functions(data, rf.params)
        design = build_design(data, cf)
        y = data.y.ravel()
        if name == "crecf_gee":
            unit_index = np.repeat(np.arange(data.n_units), data.periods)
            ss = fit_gee(y, design, unit_index, d_x=dx)
        else:
            ss = fit_pooled_probit(y, design, d_x=dx)
        for k, d in enumerate(deltas):
            out[k] = ape_point(ss, cf, x_bar, k, d, data=data).psi_l
        return out
    if name in ("pw", "pw_v"):
        fit = fit_pw(data, cf_mode="V" if name == "pw_v" else "nu")
        for k, d in enumerate(deltas):
            out[k] = ape_alt(fit, data, x_bar, k, d)
        return out
    if name == "cre":
        fit = fit_cre_probit(data)
        for k, d in enumerate(deltas):
            out[k] = ape_alt(fit, data, x_bar, k, d)
        return out
    if name == "cl":
        fit = fit_cond_logit(data)
        draws = truth.theta if truth is not None else None
        for k, d in enumerate(deltas):
            out[k] = ape_alt(fit, data, x_bar, k, d, theta_draws=draws)
        return out
    raise UnsupportedError(f"unknown estimator {name!r}", module="mc_harness")


def _replication(dgp: DgpSpec, estimators: tuple, x_bar: np.ndarray,
                 deltas: np.ndarray, child_seed):
    data, truth = generate(dgp, child_seed)
    truth_apes = np.array([true_ape(truth, dgp.phi, x_bar, k, d)
                           for k, d in enumerate(deltas)])
    results = {}
    for name in estimators:
        try:
            results[name] = estimate_apes(name, data, truth, x_bar, deltas)
        except PanelCFError:
            results[name] = None
    return truth_apes, results


@dataclass(frozen=True)
class McResult:
    dgp: DgpSpec
    estimators: tuple
    x_bar: np.ndarray
    deltas: np.ndarray
    m_requested: int
    true_apes: np.ndarray           # m x n_k
    estimates: dict                 # name -> m x n_k with NaN rows on failure
    failures: dict                  # name -> count

    def m_effective(self, name: str) -> int:
        return self.m_requested - self.failures[name]

    def summary(self) -> dict:
        """Per-estimator mean and RMSE against the per-replication true APE."""
        out = {"true": {"mean": self.true_apes.mean(axis=0)}}
        for name in self.estimators:
            est = self.estimates[name]
            ok = ~np.isnan(est[:, 0])
            err = est[ok] - self.true_apes[ok]
            out[name] = {
                "mean": est[ok].mean(axis=0),
                "rmse": np.sqrt((err ** 2).mean(axis=0)),
                "bias": err.mean(axis=0),
                "m": int(ok.sum()),
            }
        return out


def run_experiment(dgp: DgpSpec, estimators, m: int, seed: int,
                   x_bar=None, deltas=None, threads: int | None = None) -> McResult:
    """Run m replications; deterministic for a given (seed, m) regardless of
    the worker count (per-replication seed streams, index-ordered reduction)."""
    if m < 1:
        raise ConfigError("m must be >= 1", module="mc_harness")
    estimators = tuple(estimators)
    for name in estimators:
        if name not in KNOWN_ESTIMATORS:
            raise ConfigError(f"unknown estimator {name!r}; pick from "
                              f"{KNOWN_ESTIMATORS}", module="mc_harness")
    if x_bar is None or deltas is None:
        x_default, d_default = DEFAULT_EVAL[dgp.d_x]
        x_bar = x_default if x_bar is None else np.asarray(x_bar, dtype=float)
        deltas = d_default if deltas is None else np.asarray(deltas, dtype=float)
    children = np.random.SeedSequence(seed).spawn(m)
    args = [(dgp, estimators, x_bar, deltas, children[r]) for r in range(m)]
    rows = parallel_map(_replication, args, threads=threads)
    n_k = len(deltas)
    true_apes = np.stack([r[0] for r in rows])
    estimates = {}
    failures = {}
    for name in estimators:
        mat = np.full((m, n_k), np.nan)
        fails = 0
        for r, (_, res) in enumerate(rows):
            if res[name] is None:
                fails += 1
            else:
                mat[r] = res[name]
        estimates[name] = mat
        failures[name] = fails
    return McResult(dgp=dgp, estimators=estimators, x_bar=np.asarray(x_bar),
                    deltas=np.asarray(deltas), m_requested=m,
                    true_apes=true_apes, estimates=estimates, failures=failures)


def generate_linear_fixture(seed, n_units: int = 300, periods: int = 4,
                            d_x: int | None = None, d_z: int | None = None):
    """Random linear triangular panel with a continuous outcome, used by the
    CF = 2SLS equivalence check.  Returns (PanelDataset, y_continuous)."""
    rng = np.random.default_rng(seed)
    if d_x is None:
        d_x = int(rng.integers(1, 3))
    if d_z is None:
        d_z = d_x + int(rng.integers(0, 3))
    N, T = n_units, periods
    z = rng.normal(size=(N, T, d_z))
    pi = rng.normal(size=(d_x, d_z))
    pi_bar = rng.normal(size=(d_x, d_z))
    z_bar = z.mean(axis=1)
    a = rng.normal(size=(N, d_x))
    alpha = z_bar @ pi_bar.T + a
    eps = rng.normal(size=(N, T, d_x))
    x = np.einsum("itq,jq->itj", z, pi) + alpha[:, None, :] + eps
    phi = rng.normal(size=d_x)
    phi_a = rng.normal(size=d_x)
    phi_e = rng.normal(size=d_x)
    y = (x @ phi + (alpha @ phi_a)[:, None] + eps @ phi_e
         + 0.5 * rng.normal(size=(N, T)))
    data = PanelDataset(unit_ids=np.arange(N), y=np.zeros((N, T)), X=x, Z=z,
                        W=np.zeros((N, T, 0)))
    return data, y


def cf_misspec_experiment(n_units: int, m: int, seed: int,
                          threads: int | None = None) -> dict:
    """Four-cell study of the composite-residual control function: instrument
    {continuous, binary} x CF {contemporaneous residual, residual history}.

    Returns {(instrument, cf): bias draws} where bias = estimate - true APE.
    """
    cells = {}
    for inst, discretize in (("continuous", False), ("binary", True)):
        dgp = dgp_table1(n_units, discretize=discretize)
        result = run_experiment(dgp, ("pw", "pw_v"), m, seed, threads=threads)
        for name, label in (("pw", "nu"), ("pw_v", "V")):
            est = result.estimates[name]
            ok = ~np.isnan(est[:, 0])
            cells[(inst, label)] = (est[ok, 0] - result.true_apes[ok, 0])
    return cells
