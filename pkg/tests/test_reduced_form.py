import numpy as np
import pytest

from helpers import (dense_gls_delta, make_panel, max_rel_err, random_spd,
                     rng_for)
from panelcf.errors import DegenerateError, RankError
from panelcf.mc import dgp_table1, dgp_table2, generate
from panelcf.numerics import finite_diff
from panelcf.panel import PanelDataset, ReducedFormParams
from panelcf.reduced_form import (Theta1Layout, covariance_step, fit_stepwise,
                                  gls_step, loglik, score_and_hessian)


class TestGlsStep:
    def test_collapses_to_pooled_ols_under_spherical_errors(self):
        rng = rng_for(0)
        data, _ = make_panel(rng, 50, 3, 1, 2)
        delta = gls_step(data, np.eye(1) * 2.0, np.zeros((1, 1)), intercept=False)
        nt = data.n_obs
        design = np.concatenate(
            [data.Z, np.repeat(data.z_bar[:, None, :], 3, axis=1)],
            axis=2).reshape(nt, 4)
        ols = np.linalg.lstsq(design, data.X.reshape(nt), rcond=None)[0]
        assert np.abs(delta - ols).max() < 1e-10

    def test_matches_dense_quadratic_oracle(self):
        rng = rng_for(1)
        data, _ = make_panel(rng, 40, 4, 2, 3)
        sig, lam = random_spd(rng, 2), random_spd(rng, 2)
        delta = gls_step(data, sig, lam, intercept=True)
        oracle = dense_gls_delta(data, sig, lam, intercept=True)
        assert np.abs(delta - oracle).max() < 1e-9

    def test_dgp_slope_recovered(self):
        data, _ = generate(dgp_table1(5000), 11)
        fit = fit_stepwise(data, intercept=True)
        assert abs(fit.params.pi[0, 0] - 1.5) < 0.05

    def test_collinear_design_raises(self):
        rng = rng_for(2)
        data, _ = make_panel(rng, 30, 3, 1, 1)
        dup = PanelDataset(unit_ids=data.unit_ids, y=data.y, X=data.X,
                           Z=np.concatenate([data.Z, data.Z], axis=2), W=data.W)
        with pytest.raises(RankError):
            gls_step(dup, np.eye(1), np.eye(1), intercept=True)


class TestCovarianceStep:
    def test_hand_computed_within_between(self):
        # two units, T=2, residuals (1,-1) and (-1,1) around a zero fit
        z = np.zeros((2, 2, 1))
        x = np.array([[[1.0], [-1.0]], [[-1.0], [1.0]]])
        y = np.zeros((2, 2))
        data = PanelDataset(unit_ids=np.arange(2), y=y, X=x, Z=z,
                            W=np.zeros((2, 2, 0)))
        layout = Theta1Layout(d_x=1, d_z=1, intercept=False)
        sigma, lam = covariance_step(data, np.zeros(layout.p), intercept=False)
        # W_sum = 4 -> sigma = 4 / (2 * 1) = 2; B_sum = 0 -> lambda clipped ~ 0
        assert sigma[0, 0] == pytest.approx(2.0)
        assert 0.0 <= lam[0, 0] <= 1e-9

    def test_zero_between_variation_clips_lambda(self):
        rng = rng_for(3)
        n, T = 40, 4
        eps = rng.normal(size=(n, T, 1))
        eps -= eps.mean(axis=1, keepdims=True)  # no between variation at all
        x = eps
        data = PanelDataset(unit_ids=np.arange(n), y=np.zeros((n, T)), X=x,
                            Z=np.zeros((n, T, 1)), W=np.zeros((n, T, 0)))
        sigma, lam = covariance_step(data, np.zeros(2), intercept=False)
        assert lam[0, 0] <= 1e-9

    def test_dgp_population_moments(self):
        # analytic conditional moments of the binary-instrument design:
        # Var(eps) = 1 and Var(alpha | Z*) = sigma_a^2 - rho^2 sigma_a^2 T (2/pi)
        data, _ = generate(dgp_table1(5000), 4)
        fit = fit_stepwise(data, intercept=True)
        lam_true = 9.0 - (0.4 ** 2) * 9.0 * 5 * (2.0 / np.pi)
        assert fit.params.sigma_eps[0, 0] == pytest.approx(1.0, abs=0.05)
        assert fit.params.lambda_alpha[0, 0] == pytest.approx(lam_true, rel=0.10)

    def test_degenerate_error(self):
        z = np.zeros((1, 2, 2))
        x = np.zeros((1, 2, 2))
        data = PanelDataset(unit_ids=np.arange(1), y=np.zeros((1, 2)), X=x,
                            Z=z, W=np.zeros((1, 2, 0)))
        with pytest.raises(DegenerateError):
            covariance_step(data, np.zeros(8), intercept=False)


class TestStepwise:
    def test_matches_scalar_anova_oracle(self):
        rng = rng_for(5)
        data, _ = make_panel(rng, 200, 4, 1, 2, lam_chol=np.array([[1.3]]),
                             sigma_chol=np.array([[0.8]]))
        fit = fit_stepwise(data, intercept=False)
        # one-way error-component ANOVA on the GLS residuals
        layout = fit.layout
        rows = np.hstack([fit.params.pi, fit.params.pi_bar])
        z2 = np.concatenate([data.Z, np.repeat(data.z_bar[:, None, :], 4, axis=1)],
                            axis=2)
        u = data.X[:, :, 0] - np.einsum("itq,q->it", z2, rows[0])
        n, T = u.shape
        sigma_anova = ((u - u.mean(axis=1, keepdims=True)) ** 2).sum() / (n * (T - 1))
        s_between = T * (u.mean(axis=1) ** 2).sum() / n
        lam_anova = (s_between - sigma_anova) / T
        assert fit.params.sigma_eps[0, 0] == pytest.approx(sigma_anova, abs=1e-6)
        assert fit.params.lambda_alpha[0, 0] == pytest.approx(lam_anova, abs=1e-6)

    def test_loglik_monotone_on_dgp(self):
        for seed in range(3):
            data, _ = generate(dgp_table1(300), seed)
            fit = fit_stepwise(data, intercept=True)
            assert fit.converged
            diffs = np.diff(np.array(fit.loglik_history))
            assert np.all(diffs >= -1e-9)

    def test_two_regressor_dgp_slopes(self):
        data, _ = generate(dgp_table2(2000), 6)
        fit = fit_stepwise(data, intercept=True)
        target = np.array([[-1.0, 0.05], [0.025, 0.75]])
        assert np.abs(fit.params.pi - target).max() < 0.1

    def test_mean_scores_vanish_at_optimum(self):
        data, _ = generate(dgp_table1(400), 7)
        fit = fit_stepwise(data, intercept=True)
        assert np.abs(fit.per_unit_scores.mean(axis=0)).max() < 1e-6

    def test_fixed_point_satisfies_both_steps(self):
        data, _ = generate(dgp_table1(400), 8)
        fit = fit_stepwise(data, intercept=True)
        layout = fit.layout
        delta = layout.pack(fit.params)[: layout.p]
        again = gls_step(data, fit.params.sigma_eps, fit.params.lambda_alpha,
                         intercept=True)
        assert np.abs(again - delta).max() < 1e-8
        sig, lam = covariance_step(data, delta, intercept=True)
        assert np.abs(sig - fit.params.sigma_eps).max() < 1e-8
        assert np.abs(lam - fit.params.lambda_alpha).max() < 1e-8


class TestScoreHessian:
    @pytest.fixture()
    def point(self):
        rng = rng_for(9)
        data, _ = make_panel(rng, 35, 3, 2, 2)
        params = ReducedFormParams(
            pi=rng.normal(size=(2, 2)), pi_bar=rng.normal(size=(2, 2)),
            sigma_eps=random_spd(rng, 2), lambda_alpha=random_spd(rng, 2),
            intercept=rng.normal(size=2))
        return data, params

    def test_score_matches_finite_differences(self, point):
        data, params = point
        layout = Theta1Layout(d_x=2, d_z=2, intercept=True)
        theta0 = layout.pack(params)

        def ll(theta):
            p = layout.unpack(theta)
            return loglik(data, theta[: layout.p], p.sigma_eps,
                          p.lambda_alpha, intercept=True)

        scores, _ = score_and_hessian(data, params)
        assert max_rel_err(scores.sum(axis=0), finite_diff(ll, theta0)) < 1e-7

    def test_hessian_matches_fd_of_score(self, point):
        data, params = point
        layout = Theta1Layout(d_x=2, d_z=2, intercept=True)
        theta0 = layout.pack(params)

        def score_fn(theta):
            s, _ = score_and_hessian(data, layout.unpack(theta))
            return s.sum(axis=0)

        _, hess = score_and_hessian(data, params)
        assert max_rel_err(hess, finite_diff(score_fn, theta0)) < 1e-6
        assert np.abs(hess - hess.T).max() < 1e-9 * max(1, np.abs(hess).max())

    def test_loglik_finite_for_spd_inputs(self, point):
        data, params = point
        layout = Theta1Layout(d_x=2, d_z=2, intercept=True)
        ll_val = loglik(data, layout.pack(params)[: layout.p],
                        params.sigma_eps, params.lambda_alpha, intercept=True)
        assert np.isfinite(ll_val)
        # and bounded above by the Gaussian entropy term (Q_i >= 0)
        kron_ld = np.linalg.slogdet(
            np.kron(np.eye(3), params.sigma_eps)
            + np.kron(np.ones((3, 3)), params.lambda_alpha))[1]
        upper = -0.5 * data.n_units * (2 * 3 * np.log(2 * np.pi) + kron_ld)
        assert ll_val <= upper + 1e-9
