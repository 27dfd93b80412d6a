import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from panelcf.estimators import ControlFunctionProbit, ReducedFormEstimator
from panelcf.mc import dgp_table1, generate


@pytest.fixture(scope="module")
def data():
    d, _ = generate(dgp_table1(300), 0)
    return d


class TestReducedFormEstimator:
    def test_get_params_and_clone(self):
        est = ReducedFormEstimator(intercept=False, tol_loglik=1e-7)
        params = est.get_params()
        assert params["intercept"] is False
        cloned = clone(est)
        assert cloned.get_params() == params

    def test_fit_transform(self, data):
        est = ReducedFormEstimator().fit(data)
        cf = est.transform(data)
        assert cf.alpha_hat.shape == (data.n_units, data.d_x)
        assert est.result_.converged

    def test_not_fitted_error(self, data):
        with pytest.raises(NotFittedError):
            ReducedFormEstimator().transform(data)


class TestControlFunctionProbit:
    def test_fit_sets_state(self, data):
        model = ControlFunctionProbit().fit(data)
        assert model.second_stage_.converged
        assert model.covariance_ is not None
        assert model.second_stage_.v2_star is not None

    def test_set_params_round_trip(self):
        model = ControlFunctionProbit()
        model.set_params(method="gee", compute_covariance=False)
        assert model.get_params()["method"] == "gee"

    def test_predict_proba_shape_and_range(self, data):
        model = ControlFunctionProbit(compute_covariance=False).fit(data)
        proba = model.predict_proba()
        assert proba.shape == (data.n_obs, 2)
        assert np.allclose(proba.sum(axis=1), 1.0)
        preds = model.predict()
        assert set(np.unique(preds)) <= {0.0, 1.0}

    def test_ape_through_facade(self, data):
        model = ControlFunctionProbit().fit(data)
        est = model.ape([1.0], 0, 0.05)
        assert est.sigma_bar is not None and est.ci is not None
        bounds = model.ape_bounds([1.0], 0, 0.05)
        assert bounds.psi_l <= est.psi_l <= bounds.psi_u

    def test_design_intercept_adds_w_column(self, data):
        model = ControlFunctionProbit(design_intercept=True,
                                      compute_covariance=False).fit(data)
        # columns: x, constant w, alpha_hat, eps_hat
        assert model.design_.shape[1] == 4
        assert np.allclose(model.design_[:, 1], 1.0)

    def test_exogeneity_zstats(self, data):
        model = ControlFunctionProbit().fit(data)
        z = model.exogeneity_zstats()
        assert z["phi_alpha"].shape == (1,)
        assert np.isfinite(z["phi_eps"]).all()

    def test_not_fitted(self, data):
        with pytest.raises(NotFittedError):
            ControlFunctionProbit().predict_proba(data)
