import numpy as np
import pytest

from helpers import max_rel_err, rng_for
from panelcf.control_functions import compute_control_functions
from panelcf.errors import RankError, SeparationError
from panelcf.mc import dgp_table1, dgp_table2, generate, generate_linear_fixture
from panelcf.numerics import finite_diff, norm_cdf
from panelcf.panel import PanelDataset
from panelcf.reduced_form import fit_stepwise
from panelcf.second_stage import (build_design, estimate_working_correlation,
                                  fit_gee, fit_linear_cf, fit_linear_cf_within,
                                  fit_pooled_probit, gee_objective,
                                  probit_gradient, probit_loglik)


def fitted_design(n_units, seed, dgp=None):
    data, _ = generate((dgp or dgp_table1)(n_units), seed)
    rf = fit_stepwise(data, intercept=True)
    cf = compute_control_functions(data, rf.params)
    return data, cf, build_design(data, cf)


class TestBuildDesign:
    def test_column_count_one_regressor(self):
        data, cf, design = fitted_design(50, 0)
        assert design.shape == (data.n_obs, 3)

    def test_column_count_two_regressors(self):
        data, _ = generate(dgp_table2(60), 0)
        rf = fit_stepwise(data, intercept=True)
        cf = compute_control_functions(data, rf.params)
        assert build_design(data, cf).shape == (data.n_obs, 6)

    def test_design_moment_full_rank(self):
        data, cf, design = fitted_design(400, 1)
        sv = np.linalg.svd(design.T @ design / data.n_obs, compute_uv=False)
        assert sv[-1] > 1e-8 * sv[0]


class TestPooledProbit:
    def test_zero_coefficients_predict_half(self):
        rng = rng_for(2)
        design = rng.normal(size=(100, 3))
        assert np.allclose(norm_cdf(design @ np.zeros(3)), 0.5)

    def test_gradient_matches_finite_differences(self):
        rng = rng_for(3)
        design = rng.normal(size=(200, 4))
        y = (rng.random(200) < 0.4).astype(float)
        theta = rng.normal(size=4) * 0.5
        grad = probit_gradient(theta, y, design)
        fd = finite_diff(lambda t: probit_loglik(t, y, design), theta)
        assert max_rel_err(grad, fd) < 1e-6

    def test_simulated_consistency_within_three_se(self):
        rng = rng_for(4)
        n = 50_000
        design = np.column_stack([np.ones(n), rng.normal(size=n),
                                  rng.normal(size=n)])
        truth = np.array([0.2, -0.8, 0.5])
        y = (design @ truth + rng.normal(size=n) > 0).astype(float)
        fit = fit_pooled_probit(y, design, d_x=1)
        se = np.sqrt(np.diag(fit.naive_cov))
        assert np.all(np.abs(fit.theta - truth) < 3 * se)

    def test_loglik_not_below_start(self):
        data, cf, design = fitted_design(200, 5)
        fit = fit_pooled_probit(data.y.ravel(), design, d_x=1)
        assert fit.loglik_or_objective >= probit_loglik(
            np.zeros(design.shape[1]), data.y.ravel(), design)
        assert fit.converged

    def test_exogeneity_rejected_on_dgp(self):
        data, cf, design = fitted_design(1000, 6)
        fit = fit_pooled_probit(data.y.ravel(), design, d_x=1)
        se = np.sqrt(np.diag(fit.naive_cov))
        assert fit.theta[0] < 0                       # sign of phi
        assert abs(fit.theta[1] / se[1]) > 2.0        # phi_alpha significant
        assert abs(fit.theta[2] / se[2]) > 2.0        # phi_eps significant

    def test_separation_raises(self):
        x = np.linspace(-2, 2, 60)
        y = (x > 0).astype(float)
        with pytest.raises(SeparationError):
            fit_pooled_probit(y, np.column_stack([np.ones(60), x]), d_x=1)

    def test_rank_deficient_design(self):
        rng = rng_for(7)
        col = rng.normal(size=80)
        design = np.column_stack([col, col])
        y = (rng.random(80) < 0.5).astype(float)
        with pytest.raises(RankError):
            fit_pooled_probit(y, design, d_x=1)


class TestWorkingCorrelation:
    def test_zero_residuals_give_zero(self):
        # fitted probabilities = observed frequencies in the limit y == m
        rng = rng_for(8)
        n, T = 40, 3
        design = np.zeros((n * T, 1))
        y = np.tile([1.0, 0.0, 1.0], n)[: n * T]
        unit_index = np.repeat(np.arange(n), T)
        # theta chosen so m = 0.5; residuals alternate +-0.5 independently
        rho = estimate_working_correlation(y, design, np.zeros(1), unit_index)
        assert abs(rho - (-1.0 / 3.0)) < 0.2  # deterministic pattern, not zero

    def test_perfect_fit_residuals_give_zero(self):
        # saturated index reproduces y exactly; standardized residuals vanish
        n, T = 25, 3
        signs = np.tile([1.0, -1.0, 1.0], n)
        design = (50.0 * signs)[:, None]
        y = (signs > 0).astype(float)
        unit_index = np.repeat(np.arange(n), T)
        rho = estimate_working_correlation(y, design, np.ones(1), unit_index)
        assert abs(rho) < 1e-6

    def test_identical_residuals_clamped_below_one(self):
        n, T = 30, 2
        design = np.zeros((n * T, 1))
        y = np.ones(n * T)
        unit_index = np.repeat(np.arange(n), T)
        rho = estimate_working_correlation(y, design, np.zeros(1), unit_index)
        assert rho == pytest.approx(1.0 - 1e-6)

    def test_dgp_correlation_positive(self):
        for seed in range(3):
            data, cf, design = fitted_design(500, 10 + seed)
            fit = fit_pooled_probit(data.y.ravel(), design, d_x=1)
            unit_index = np.repeat(np.arange(data.n_units), data.periods)
            rho = estimate_working_correlation(data.y.ravel(), design,
                                               fit.theta, unit_index)
            assert 0.0 < rho < 1.0


class TestGee:
    def test_independence_matches_pooled_probit(self):
        # serially independent outcomes: GEE and probit agree closely
        rng = rng_for(11)
        n, T = 2000, 4
        design = rng.normal(size=(n * T, 2))
        truth = np.array([0.6, -0.4])
        y = (design @ truth + rng.normal(size=n * T) > 0).astype(float)
        unit_index = np.repeat(np.arange(n), T)
        probit = fit_pooled_probit(y, design, d_x=1)
        gee = fit_gee(y, design, unit_index, d_x=1)
        assert np.abs(gee.rho_work) < 0.05
        assert np.abs(gee.theta - probit.theta).max() < 1e-3

    def test_objective_non_increasing(self):
        data, cf, design = fitted_design(300, 12)
        y = data.y.ravel()
        unit_index = np.repeat(np.arange(data.n_units), data.periods)
        prelim = fit_pooled_probit(y, design, d_x=1)
        rho = estimate_working_correlation(y, design, prelim.theta, unit_index)
        y_units = y.reshape(data.n_units, data.periods)
        d_units = design.reshape(data.n_units, data.periods, -1)
        m = np.clip(norm_cdf(np.einsum("itk,k->it", d_units, prelim.theta)),
                    1e-10, 1 - 1e-10)
        d_half = np.sqrt(m * (1 - m))
        obj_start = gee_objective(prelim.theta, y_units, d_units, d_half, rho)
        gee = fit_gee(y, design, unit_index, d_x=1)
        assert gee.loglik_or_objective <= obj_start + 1e-9

    def test_dgp_gee_and_probit_apes_close(self):
        from panelcf.effects import ape_point
        data, cf, design = fitted_design(1000, 13)
        y = data.y.ravel()
        unit_index = np.repeat(np.arange(data.n_units), data.periods)
        probit = fit_pooled_probit(y, design, d_x=1)
        gee = fit_gee(y, design, unit_index, d_x=1)
        a1 = ape_point(probit, cf, [1.0], 0, 0.05).psi_l
        a2 = ape_point(gee, cf, [1.0], 0, 0.05).psi_l
        assert abs(a1 - a2) / abs(a1) < 0.10


class TestLinearEquivalence:
    def test_identity_on_random_fixtures(self):
        worst = 0.0
        for seed in range(6):
            data, y = generate_linear_fixture(np.random.SeedSequence(seed))
            rf = fit_stepwise(data, intercept=False)
            cf = compute_control_functions(data, rf.params)
            lin = fit_linear_cf(y, data, cf, rf.params)
            worst = max(worst, lin.max_abs_gap)
        assert worst < 1e-8

    def test_exogenous_x_close_to_ols(self):
        rng = rng_for(14)
        n, T = 400, 4
        z = rng.normal(size=(n, T, 2))
        x = np.einsum("itq,jq->itj", z, np.array([[1.0, 0.5]])) \
            + rng.normal(size=(n, T, 1))
        y = x[:, :, 0] * 0.7 + 0.3 * rng.normal(size=(n, T))
        data = PanelDataset(unit_ids=np.arange(n), y=np.zeros((n, T)), X=x,
                            Z=z, W=np.zeros((n, T, 0)))
        rf = fit_stepwise(data, intercept=False)
        cf = compute_control_functions(data, rf.params)
        lin = fit_linear_cf(y, data, cf, rf.params)
        ols = np.linalg.lstsq(x.reshape(n * T, 1), y.ravel(), rcond=None)[0]
        assert abs(lin.phi_cf[0] - ols[0]) < 0.05

    def test_within_variant_equals_fe2sls(self):
        for seed in range(4):
            data, y = generate_linear_fixture(np.random.SeedSequence(100 + seed))
            rf = fit_stepwise(data, intercept=False)
            cf = compute_control_functions(data, rf.params)
            w_cf, w_iv = fit_linear_cf_within(y, data, cf)
            assert np.abs(w_cf - w_iv).max() < 1e-8
