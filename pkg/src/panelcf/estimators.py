"""Scikit-learn style estimator facade over the two-step pipeline.

These classes follow the fit/transform/predict idiom with hyperparameters in
``__init__`` (so ``get_params``/``set_params``/``clone`` work) and fitted
state in trailing-underscore attributes.  They wrap the module-level
functions that carry the numerical contracts.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .control_functions import compute_control_functions
from .effects import P_BAR_DEFAULT, ape_bounds, ape_point, asf_point
from .errors import ConfigError, ShapeError
from .inference import attach_inference, v2_star
from .panel import PanelDataset
from .reduced_form import fit_stepwise
from .second_stage import build_design, fit_gee, fit_pooled_probit, predict_proba


def check_panel(data) -> PanelDataset:
    if not isinstance(data, PanelDataset):
        raise ShapeError("expected a PanelDataset (use load_panel_csv or the "
                         "PanelDataset constructor)", module="core_model")
    return data


def _require_fitted(est, attr: str):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet")


class ReducedFormEstimator(BaseEstimator):
    """First-stage system estimator; ``transform`` yields control functions."""

    def __init__(self, intercept: bool = True, max_iter: int = 500,
                 tol_loglik: float = 1e-9):
        self.intercept = intercept
        self.max_iter = max_iter
        self.tol_loglik = tol_loglik

    def fit(self, data: PanelDataset, y=None):
        data = check_panel(data)
        self.result_ = fit_stepwise(data, max_iter=self.max_iter,
                                    tol_loglik=self.tol_loglik,
                                    intercept=self.intercept)
        self.params_ = self.result_.params
        return self

    def transform(self, data: PanelDataset):
        _require_fitted(self, "params_")
        return compute_control_functions(check_panel(data), self.params_)

    def fit_transform(self, data: PanelDataset, y=None):
        return self.fit(data).transform(data)


class ControlFunctionProbit(BaseEstimator):
    """Two-step control-function estimator of the binary-response model.

    ``fit`` runs reduced form -> control functions -> pooled probit (or GEE
    with exchangeable working correlation) and, unless disabled, the
    two-step-corrected covariance.  ``ape``/``ape_bounds`` evaluate average
    partial effects at a covariate point.
    """

    def __init__(self, method: str = "probit", rf_intercept: bool = True,
                 design_intercept: bool = False, compute_covariance: bool = True,
                 p_bar: float = P_BAR_DEFAULT):
        self.method = method
        self.rf_intercept = rf_intercept
        self.design_intercept = design_intercept
        self.compute_covariance = compute_covariance
        self.p_bar = p_bar

    def _augmented(self, data: PanelDataset) -> PanelDataset:
        data = check_panel(data)
        if not self.design_intercept:
            return data
        ones = np.ones((data.n_units, data.periods, 1))
        return PanelDataset(unit_ids=data.unit_ids, y=data.y, X=data.X,
                            Z=data.Z, W=np.concatenate([data.W, ones], axis=2))

    def fit(self, data: PanelDataset, y=None):
        if self.method not in ("probit", "gee"):
            raise ConfigError(f"unknown method {self.method!r}", module="cli_frontend")
        data = self._augmented(data)
        self.data_ = data
        self.reduced_form_ = fit_stepwise(data, intercept=self.rf_intercept)
        self.control_functions_ = compute_control_functions(data, self.reduced_form_.params)
        design = build_design(data, self.control_functions_)
        self.design_ = design
        y_flat = data.y.ravel()
        if self.method == "gee":
            unit_index = np.repeat(np.arange(data.n_units), data.periods)
            self.second_stage_ = fit_gee(y_flat, design, unit_index, d_x=data.d_x)
        else:
            self.second_stage_ = fit_pooled_probit(y_flat, design, d_x=data.d_x)
        if self.compute_covariance:
            self.covariance_ = v2_star(data, self.reduced_form_, self.second_stage_,
                                       cf=self.control_functions_)
            self.second_stage_ = self.second_stage_.with_v2_star(self.covariance_.v2_star)
        else:
            self.covariance_ = None
        return self

    def predict_proba(self, data: PanelDataset | None = None) -> np.ndarray:
        """Fitted response probabilities, NT-vector (two columns sklearn-style)."""
        _require_fitted(self, "second_stage_")
        if data is None:
            design = self.design_
        else:
            data = self._augmented(data)
            cf = compute_control_functions(data, self.reduced_form_.params)
            design = build_design(data, cf)
        p1 = predict_proba(design, self.second_stage_.theta)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, data: PanelDataset | None = None) -> np.ndarray:
        return (self.predict_proba(data)[:, 1] >= 0.5).astype(float)

    def asf(self, x_bar) -> float:
        _require_fitted(self, "second_stage_")
        return asf_point(self.second_stage_, self.control_functions_, x_bar,
                         data=self.data_)

    def ape(self, x_bar, k: int, delta_k: float, inference: bool = True):
        _require_fitted(self, "second_stage_")
        est = ape_point(self.second_stage_, self.control_functions_, x_bar, k,
                        delta_k, data=self.data_)
        if inference and self.covariance_ is not None:
            est = attach_inference(est, self.second_stage_, self.covariance_,
                                   self.control_functions_, data=self.data_)
        return est

    def ape_bounds(self, x_bar, k: int, delta_k: float, p_bar: float | None = None,
                   inference: bool = True):
        _require_fitted(self, "second_stage_")
        est = ape_bounds(self.second_stage_, self.control_functions_, self.data_,
                         x_bar, k, delta_k,
                         p_bar=self.p_bar if p_bar is None else p_bar)
        if inference and self.covariance_ is not None:
            est = attach_inference(est, self.second_stage_, self.covariance_,
                                   self.control_functions_, data=self.data_)
        return est

    def exogeneity_zstats(self) -> dict:
        """z statistics of the control-function coefficients (two-step SEs
        when available): jointly insignificant CFs mean x is exogenous."""
        _require_fitted(self, "second_stage_")
        fit = self.second_stage_
        cov = (self.covariance_.cov_theta2 if self.covariance_ is not None
               else fit.naive_cov)
        se = np.sqrt(np.diag(cov))
        theta = fit.theta
        m = fit.d_x
        k = theta.size
        return {
            "phi_alpha": theta[k - 2 * m: k - m] / se[k - 2 * m: k - m],
            "phi_eps": theta[k - m:] / se[k - m:],
        }
