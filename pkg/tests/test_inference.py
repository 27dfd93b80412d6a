import numpy as np
import pytest

from helpers import max_rel_err, rng_for
from panelcf.control_functions import compute_control_functions
from panelcf.effects import ape_bounds, ape_point
from panelcf.errors import DomainError
from panelcf.inference import (attach_inference, ape_se_delta,
                               bootstrap_two_step, imbens_manski_ci,
                               percentile_ci, v2_star, _design_derivative_pieces)
from panelcf.mc import DgpSpec, dgp_table1, generate
from panelcf.numerics import finite_diff, norm_cdf
from panelcf.panel import PanelDataset
from panelcf.reduced_form import fit_stepwise
from panelcf.second_stage import build_design, fit_gee, fit_pooled_probit


@pytest.fixture(scope="module")
def fitted():
    data, truth = generate(dgp_table1(400), 0)
    rf = fit_stepwise(data, intercept=True)
    cf = compute_control_functions(data, rf.params)
    ss = fit_pooled_probit(data.y.ravel(), build_design(data, cf), d_x=1)
    return data, rf, cf, ss


class TestDerivativePieces:
    def test_chain_rule_matches_finite_differences(self, fitted):
        data, rf, cf, ss = fitted
        layout = rf.layout
        theta1 = layout.pack(rf.params)
        pieces = _design_derivative_pieces(data, rf, ss, cf)

        def mfun(theta):
            p = layout.unpack(theta)
            cf2 = compute_control_functions(data, p)
            d2 = build_design(data, cf2)
            return (d2 @ ss.theta).reshape(data.n_units, data.periods)[:4].ravel()

        fd = finite_diff(mfun, theta1)
        an = pieces[:4].reshape(-1, pieces.shape[2])
        assert max_rel_err(an, fd) < 1e-6

    def test_eps_lambda_derivative_is_minus_alpha(self, fitted):
        # the Lambda (and Sigma) sensitivities of eps_hat and alpha_hat cancel
        data, rf, cf, ss = fitted
        layout = rf.layout
        theta1 = layout.pack(rf.params)

        def both(theta):
            p = layout.unpack(theta)
            cf2 = compute_control_functions(data, p)
            return np.concatenate([cf2.alpha_hat[:3, 0], cf2.eps_hat[:3, 0, 0]])

        jac = finite_diff(both, theta1)
        cov_cols = jac[:, layout.p:]
        assert np.abs(cov_cols[:3] + cov_cols[3:]).max() < 1e-7


class TestV2Star:
    def test_known_theta1_reduces_to_second_stage_sandwich(self, fitted):
        data, rf, cf, ss = fitted
        cov = v2_star(data, rf, ss, cf=cf, first_stage=False)
        blocks = cov.blocks
        h_inv = np.linalg.inv(blocks["H22"])
        direct = h_inv @ blocks["V_HH"] @ h_inv.T
        assert np.abs(cov.v2_star - direct).max() < 1e-12

    def test_symmetric_and_psd(self, fitted):
        data, rf, cf, ss = fitted
        cov = v2_star(data, rf, ss, cf=cf)
        assert np.abs(cov.v2_star - cov.v2_star.T).max() < 1e-12
        assert np.linalg.eigvalsh(cov.v2_star).min() >= -1e-12

    def test_correction_inflates_variance(self, fitted):
        data, rf, cf, ss = fitted
        full = v2_star(data, rf, ss, cf=cf).se
        naive = v2_star(data, rf, ss, cf=cf, first_stage=False).se
        assert np.all(full >= naive * 0.8)  # typically larger, never collapsing

    def test_exogenous_truth_correction_small(self):
        # when the control functions carry no signal, the first-stage
        # correction barely moves the standard errors
        dgp = DgpSpec(n_units=5000, corr_z_alpha=((0.0,),),
                      corr_z_theta=(0.0,), corr_alpha_theta=(0.0,),
                      corr_zeta_eps=(0.0,))
        data, _ = generate(dgp, 1)
        rf = fit_stepwise(data, intercept=True)
        cf = compute_control_functions(data, rf.params)
        ss = fit_pooled_probit(data.y.ravel(), build_design(data, cf), d_x=1)
        full = v2_star(data, rf, ss, cf=cf).se
        naive = v2_star(data, rf, ss, cf=cf, first_stage=False).se
        assert np.abs(full / naive - 1.0).max() < 0.05

    def test_gee_covariance_runs(self, fitted):
        data, rf, cf, ss = fitted
        unit_index = np.repeat(np.arange(data.n_units), data.periods)
        gee = fit_gee(data.y.ravel(), build_design(data, cf), unit_index, d_x=1)
        cov = v2_star(data, rf, gee, cf=cf)
        assert np.all(np.isfinite(cov.se))


class TestApeSe:
    def test_shared_sigma_for_both_bounds(self, fitted):
        data, rf, cf, ss = fitted
        cov = v2_star(data, rf, ss, cf=cf)
        est = ape_bounds(ss, cf, data, [1.0], 0, 0.05)
        sigma = ape_se_delta(ss, cov, cf, est, data=data)
        done = attach_inference(est, ss, cov, cf, data=data)
        assert done.sigma_bar == pytest.approx(sigma)
        assert done.ci[0] <= done.psi_l and done.ci[1] >= done.psi_u

    def test_point_ci_symmetric_normal(self, fitted):
        data, rf, cf, ss = fitted
        cov = v2_star(data, rf, ss, cf=cf)
        est = attach_inference(ape_point(ss, cf, [1.0], 0, 0.05, data=data),
                               ss, cov, cf, data=data)
        half = (est.ci[1] - est.ci[0]) / 2.0
        centre = (est.ci[1] + est.ci[0]) / 2.0
        assert centre == pytest.approx(est.psi_l, abs=1e-12)
        nt = data.n_obs
        assert half == pytest.approx(1.959964 * est.sigma_bar / np.sqrt(nt), rel=1e-5)

    def test_zero_theta_closed_form(self):
        # Theta2 = 0: gradient has the phi(0) * [x-part] structure, so the
        # delta-method variance is computable by hand
        from panelcf.panel import SecondStageParams
        from panelcf.second_stage import SecondStageFit
        from panelcf.control_functions import ControlFunctionSet
        from panelcf.inference import TwoStepCovariance
        rng = rng_for(5)
        n, T = 40, 3
        cf = ControlFunctionSet(alpha_hat=rng.normal(size=(n, 1)),
                                eps_hat=rng.normal(size=(n, T, 1)),
                                omega=np.eye(1), shrinkage=0.5 * np.eye(1))
        fit = SecondStageFit(
            params=SecondStageParams.from_theta(np.zeros(3), d_x=1),
            method="pooled_probit", rho_work=0.0, naive_cov=np.eye(3),
            loglik_or_objective=0.0, n_iter=1, converged=True, d_x=1)
        cov = TwoStepCovariance(v2_star=np.eye(3), blocks={}, method="analytic",
                                n_units=n)
        est = ape_point(fit, cf, [1.0], 0, 0.5)
        sigma = ape_se_delta(fit, cov, cf, est)
        phi0 = 1.0 / np.sqrt(2 * np.pi)
        pooled = cf.pooled()
        g = np.zeros(3)
        g[0] = phi0 * (1.5 - 1.0) / 0.5  # x column: (x+delta) - x over delta
        g[1] = phi0 * (pooled[:, 0].mean() - pooled[:, 0].mean()) / 0.5
        g[2] = 0.0
        expected = np.sqrt(n * T * g @ (np.eye(3) / n) @ g)
        assert sigma == pytest.approx(expected, rel=1e-10)


class TestImbensManski:
    def test_degenerate_interval_two_sided_value(self):
        lo, hi, c = imbens_manski_ci(-0.1, -0.1, 1.0, 5000)
        assert c == pytest.approx(1.959964, abs=1e-6)

    def test_wide_interval_one_sided_limit(self):
        lo, hi, c = imbens_manski_ci(-0.5, 0.5, 0.01, 5000)
        assert c == pytest.approx(1.644854, abs=1e-6)

    def test_defining_equation_satisfied(self):
        psi_l, psi_u, sigma, nt = -0.1, -0.08, 0.9, 4000
        lo, hi, c = imbens_manski_ci(psi_l, psi_u, sigma, nt)
        gap = np.sqrt(nt) * (psi_u - psi_l) / sigma
        assert norm_cdf(c + gap) - norm_cdf(-c) == pytest.approx(0.95, abs=1e-9)

    def test_mid_case_against_grid_search(self):
        sigma, nt = 1.0, 100
        psi_l, psi_u = 0.0, 0.1     # sqrt(nt) * gap / sigma = 1
        _, _, c = imbens_manski_ci(psi_l, psi_u, sigma, nt)
        grid = np.linspace(0.0, 5.0, 2_000_001)
        vals = norm_cdf(grid + 1.0) - norm_cdf(-grid) - 0.95
        oracle = grid[np.argmax(vals >= 0.0)]
        assert c == pytest.approx(oracle, abs=5e-6)

    def test_c_monotone_and_bounded(self):
        cs = []
        for gap in (0.0, 0.5, 1.0, 2.0, 5.0, 20.0):
            _, _, c = imbens_manski_ci(0.0, gap, 1.0, 1)
            cs.append(c)
        assert all(a >= b - 1e-12 for a, b in zip(cs, cs[1:]))
        assert all(1.6448 <= c <= 1.9600 for c in cs)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            imbens_manski_ci(0.0, 0.1, 0.0, 100)
        with pytest.raises(DomainError):
            imbens_manski_ci(0.2, 0.1, 1.0, 100)


class TestBootstrap:
    @pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
    def test_degenerate_data_zero_covariance(self):
        # every unit carries the same profile, so any unit resample
        # reproduces the original dataset exactly (the unit-mean regressor
        # is then constant, hence the expected ill-conditioning warning)
        rng = rng_for(6)
        n, T = 30, 12
        z0 = rng.normal(size=(1, T, 1))
        x0 = 1.2 * z0 + 0.8 * rng.normal(size=(1, T, 1))
        y0 = (0.5 * x0[:, :, 0] + rng.normal(size=(1, T)) > 0).astype(float)
        data = PanelDataset(unit_ids=np.arange(n),
                            y=np.tile(y0, (n, 1)),
                            X=np.tile(x0, (n, 1, 1)),
                            Z=np.tile(z0, (n, 1, 1)),
                            W=np.zeros((n, T, 0)))
        boot = bootstrap_two_step(data, B=8, seed=0)
        assert np.abs(boot.v2_star).max() < 1e-20

    def test_fixed_seed_bit_identical(self):
        data, _ = generate(dgp_table1(120), 7)
        b1 = bootstrap_two_step(data, B=12, seed=42)
        b2 = bootstrap_two_step(data, B=12, seed=42)
        assert np.array_equal(b1.theta2_draws, b2.theta2_draws)
        assert np.array_equal(b1.v2_star, b2.v2_star)

    def test_thread_count_does_not_change_results(self):
        data, _ = generate(dgp_table1(100), 8)
        b1 = bootstrap_two_step(data, B=10, seed=9, threads=1)
        b2 = bootstrap_two_step(data, B=10, seed=9, threads=2)
        assert np.array_equal(b1.theta2_draws, b2.theta2_draws)

    def test_ape_draws_and_percentile_ci(self):
        data, _ = generate(dgp_table1(150), 10)
        boot = bootstrap_two_step(data, B=16, seed=1,
                                  ape_points=((np.array([1.0]), 0, 0.05),))
        assert boot.ape_draws.shape == (boot.effective_b, 1)
        lo, hi = percentile_ci(boot.ape_draws[:, 0])
        assert lo <= hi
