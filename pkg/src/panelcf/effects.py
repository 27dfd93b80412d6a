"""Average structural function and average partial effects.

The ASF at a covariate value x̄ is the partial mean of the probit response
over the empirical distribution of the control functions,

    G(x̄) = (1/NT) sum_{i,t} Phi(x̄' phi + w_it' phi_w
                                 + alpha_hat_i' phi_a + eps_hat_it' phi_e).

When the conditional support of the control functions given x̄ falls short of
their marginal support, the ASF is only set-identified: the partial mean is
restricted to an estimated support set (an upper level set of a kernel
conditional density) and the trimmed-away mass P̂ widens the APE into sharp
bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control_functions import ControlFunctionSet
from .errors import DomainError, ShapeError, SupportError
from .numerics import norm_cdf, norm_pdf
from .panel import PanelDataset
from .second_stage import SecondStageFit

#: default probability level retained by the support trimming
P_BAR_DEFAULT = 0.975


@dataclass(frozen=True)
class ApeEstimate:
    x_bar: np.ndarray
    k: int
    delta_k: float
    kind: str                      # "point" | "bounds"
    psi_l: float
    psi_u: float
    p_xbar: float
    p_xbar_delta: float
    sigma_bar: float | None = None
    ci: tuple | None = None
    mask_xbar: np.ndarray | None = None
    mask_delta: np.ndarray | None = None

    def __post_init__(self):
        if self.psi_l > self.psi_u + 1e-12:
            raise DomainError("psi_l > psi_u", module="effects")
        for p in (self.p_xbar, self.p_xbar_delta):
            if not (-1e-12 <= p <= 1.0 + 1e-12):
                raise DomainError("P̂ outside [0, 1]", module="effects")

    @property
    def value(self):
        if self.kind == "point":
            return self.psi_l
        return (self.psi_l, self.psi_u)

    @property
    def width(self) -> float:
        return self.psi_u - self.psi_l


def _offsets(fit: SecondStageFit, cf: ControlFunctionSet,
             data: PanelDataset | None) -> np.ndarray:
    """NT vector of w'phi_w + alpha_hat'phi_a + eps_hat'phi_e contributions."""
    m = fit.d_x
    pooled = cf.pooled()
    off = pooled[:, :m] @ fit.params.phi_alpha + pooled[:, m:] @ fit.params.phi_eps
    phi_w = fit.params.phi[m:]
    if phi_w.size:
        if data is None:
            raise ShapeError("data with w columns required to evaluate the ASF",
                             module="effects")
        off = off + data.W.reshape(pooled.shape[0], -1) @ phi_w
    return off


def asf_point(fit: SecondStageFit, cf: ControlFunctionSet, x_bar,
              data: PanelDataset | None = None) -> float:
    """Partial-mean ASF estimate at x̄ (full support assumed)."""
    x_bar = np.asarray(x_bar, dtype=float).reshape(-1)
    if x_bar.size != fit.d_x:
        raise ShapeError("x_bar must be a d_x vector", module="effects")
    idx = float(x_bar @ fit.params.phi[: fit.d_x]) + _offsets(fit, cf, data)
    return float(norm_cdf(idx).mean())


def ape_point(fit: SecondStageFit, cf: ControlFunctionSet, x_bar, k: int,
              delta_k: float, data: PanelDataset | None = None) -> ApeEstimate:
    """Finite-difference APE of coordinate k of x̄, point-identified case."""
    if delta_k == 0:
        raise DomainError("delta_k must be nonzero", module="effects")
    x_bar = np.asarray(x_bar, dtype=float).reshape(-1)
    x_shift = x_bar.copy()
    x_shift[k] += delta_k
    value = (asf_point(fit, cf, x_shift, data) - asf_point(fit, cf, x_bar, data)) / delta_k
    return ApeEstimate(x_bar=x_bar, k=k, delta_k=float(delta_k), kind="point",
                       psi_l=value, psi_u=value, p_xbar=0.0, p_xbar_delta=0.0)


# ---------------------------------------------------------------------------
# conditional density, trimming, bounds
# ---------------------------------------------------------------------------

def rule_of_thumb_bandwidths(values: np.ndarray, q_total: int) -> np.ndarray:
    """Per-dimension normal-reference bandwidths 1.06 sigma_j M^(-1/(4+q))."""
    values = np.atleast_2d(values)
    m = values.shape[0]
    sd = values.std(axis=0, ddof=1) if m > 1 else np.zeros(values.shape[1])
    if np.any(sd <= 0):
        raise DomainError("degenerate dimension: supply explicit bandwidths",
                          module="effects")
    return 1.06 * sd * m ** (-1.0 / (4 + q_total))


def conditional_density_batch(cf_points: np.ndarray, x_values: np.ndarray,
                              x_bars: np.ndarray,
                              bandwidths: np.ndarray | None = None,
                              chunk: int = 1024) -> np.ndarray:
    """f(cf | x = x̄) at every cf row for several x̄ columns in one kernel pass.

    Returns M x n_points; the M x M control-function kernel is shared across
    evaluation points, only the x̄ weights differ.
    """
    cf_points = np.atleast_2d(np.asarray(cf_points, dtype=float))
    x_values = np.atleast_2d(np.asarray(x_values, dtype=float))
    x_bars = np.atleast_2d(np.asarray(x_bars, dtype=float))
    m, p = cf_points.shape
    if x_values.shape != (m, x_bars.shape[1]):
        raise ShapeError("x_values must be M x d_x matching x_bar", module="effects")
    q_total = p + x_bars.shape[1]
    if bandwidths is None:
        bandwidths = rule_of_thumb_bandwidths(np.hstack([cf_points, x_values]), q_total)
    bandwidths = np.asarray(bandwidths, dtype=float).reshape(-1)
    if bandwidths.size != q_total or np.any(bandwidths <= 0):
        raise DomainError("need one positive bandwidth per dimension",
                          module="effects")
    h_cf, h_x = bandwidths[:p], bandwidths[p:]

    weights = np.empty((m, x_bars.shape[0]))
    for i, xb in enumerate(x_bars):
        ux = (x_values - xb) / h_x
        weights[:, i] = np.exp(-0.5 * np.sum(ux * ux, axis=1))
    w_sums = weights.sum(axis=0)
    if np.any(w_sums <= 0.0) or not np.isfinite(w_sums).all():
        raise SupportError("x̄ lies outside the data range (zero marginal density)",
                           module="effects")
    const = float(np.prod(1.0 / (h_cf * np.sqrt(2.0 * np.pi))))
    scaled = cf_points / h_cf
    sq = np.sum(scaled * scaled, axis=1)
    out = np.empty((m, x_bars.shape[0]))
    for start in range(0, m, chunk):
        stop = min(start + chunk, m)
        d2 = (sq[start:stop, None] + sq[None, :]
              - 2.0 * scaled[start:stop] @ scaled.T)
        np.maximum(d2, 0.0, out=d2)
        kern = np.exp(-0.5 * d2)
        out[start:stop] = kern @ weights
    return const * out / w_sums


def conditional_density(cf_points: np.ndarray, x_values: np.ndarray, x_bar,
                        bandwidths: np.ndarray | None = None,
                        chunk: int = 1024) -> np.ndarray:
    """Product-Gaussian kernel estimate of f(cf | x = x̄) at every cf row.

    ``cf_points`` is M x p (pooled control-function rows), ``x_values`` is
    M x d_x, and the estimate at row j is the x̄-kernel-weighted KDE of the
    cf dimensions.  Bandwidths default to the normal-reference rule with
    q = p + d_x total continuous dimensions.
    """
    x_bar = np.asarray(x_bar, dtype=float).reshape(1, -1)
    return conditional_density_batch(cf_points, x_values, x_bar,
                                     bandwidths=bandwidths, chunk=chunk)[:, 0]


def trimming_threshold(density_values: np.ndarray, p_bar: float) -> float:
    """Level-set threshold delta(p̄) = inf{gamma : Ĥ(gamma) >= 1 - p̄} where
    Ĥ is the empirical CDF of the density values."""
    f = np.asarray(density_values, dtype=float).ravel()
    if f.size == 0:
        raise DomainError("empty density sample", module="effects")
    if not (0.0 < p_bar < 1.0):
        raise DomainError("p_bar must lie in (0, 1)", module="effects")
    s = np.sort(f)
    target = (1.0 - p_bar) * f.size
    counts = np.searchsorted(s, s, side="right")
    idx = int(np.argmax(counts >= target - 1e-12))
    return float(s[idx])


def ape_bounds(fit: SecondStageFit, cf: ControlFunctionSet, data: PanelDataset,
               x_bar, k: int, delta_k: float, p_bar: float = P_BAR_DEFAULT,
               bandwidths: np.ndarray | None = None) -> ApeEstimate:
    """Sharp APE bounds from the trimmed partial means.

    With G̃(x̄) the partial mean restricted to the estimated support set and
    P̂(x̄) the trimmed-away share, the interval is
    [ (G̃(x̄_Δ) - G̃(x̄) - P̂(x̄)) / Δ ,  (G̃(x̄_Δ) + P̂(x̄_Δ) - G̃(x̄)) / Δ ].
    Boundary points f̂ = delta(p̄) are kept inside the support set.
    """
    if delta_k == 0:
        raise DomainError("delta_k must be nonzero", module="effects")
    x_bar = np.asarray(x_bar, dtype=float).reshape(-1)
    if x_bar.size != fit.d_x:
        raise ShapeError("x_bar must be a d_x vector", module="effects")
    x_shift = x_bar.copy()
    x_shift[k] += delta_k
    pooled = cf.pooled()
    x_flat = data.X.reshape(pooled.shape[0], -1)
    off = _offsets(fit, cf, data)
    phi_x = fit.params.phi[: fit.d_x]
    dens_both = conditional_density_batch(pooled, x_flat,
                                          np.stack([x_bar, x_shift]),
                                          bandwidths=bandwidths)

    def trimmed(point, dens):
        thresh = trimming_threshold(dens, p_bar)
        keep = dens >= thresh
        g_trim = float(np.mean(norm_cdf(float(point @ phi_x) + off) * keep))
        p_out = float(np.mean(~keep))
        return g_trim, p_out, keep

    g1, p1, keep1 = trimmed(x_bar, dens_both[:, 0])
    g2, p2, keep2 = trimmed(x_shift, dens_both[:, 1])
    psi_l = (g2 - g1 - p1) / delta_k
    psi_u = (g2 + p2 - g1) / delta_k
    if delta_k < 0:
        psi_l, psi_u = psi_u, psi_l
    return ApeEstimate(x_bar=x_bar, k=k, delta_k=float(delta_k), kind="bounds",
                       psi_l=psi_l, psi_u=psi_u, p_xbar=p1, p_xbar_delta=p2,
                       mask_xbar=keep1, mask_delta=keep2)


def asf_gradient(fit: SecondStageFit, cf: ControlFunctionSet, x_bar,
                 data: PanelDataset | None = None,
                 mask: np.ndarray | None = None) -> np.ndarray:
    """d G̃(x̄) / d Theta2: (1/NT) sum phi(idx) * 1[in support] * design row,
    with the design row evaluated at x̄."""
    x_bar = np.asarray(x_bar, dtype=float).reshape(-1)
    m = fit.d_x
    pooled = cf.pooled()
    nt = pooled.shape[0]
    off = _offsets(fit, cf, data)
    idx = float(x_bar @ fit.params.phi[:m]) + off
    dens = norm_pdf(idx)
    if mask is not None:
        dens = dens * mask
    k_total = fit.theta.size
    grad = np.zeros(k_total)
    grad[:m] = dens.sum() / nt * x_bar
    n_w = k_total - 3 * m
    if n_w:
        if data is None:
            raise ShapeError("data required for w gradient", module="effects")
        w_flat = data.W.reshape(nt, -1)
        grad[m:m + n_w] = dens @ w_flat / nt
    grad[k_total - 2 * m: k_total - m] = dens @ pooled[:, :m] / nt
    grad[k_total - m:] = dens @ pooled[:, m:] / nt
    return grad
