from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest
from scipy.optimize import minimize, root
from scipy.special import expit

from shadowfit import (
    BandwidthRule,
    Dataset,
    FitConfig,
    MechanismModel,
    Observation,
    OutcomeModel,
    bootstrap_variance,
    complete_case_fit,
    efficient_score,
    estimating_fn,
    fit,
    fit_covariate_density,
    sandwich,
    score_terms,
)
from shadowfit.densities import NormalDensity
from shadowfit.estimator import EstimationError, build_plan, evaluate, logistic_mle, prepare_data
from shadowfit.fredholm import BSolution, assemble_empirical, solve_system
from shadowfit.integrate import YGrid, y_grid
from shadowfit.simulate import generate, replicate_seed, scenario

from conftest import make_linear_data


def _s1(seed, N=500, correct=True):
    spec = scenario("S1", N=N, correct=correct)
    return spec, generate(spec, seed)


def _irls(X, y, iters=60):
    """Textbook iteratively reweighted least squares."""
    b = np.zeros(X.shape[1])
    for _ in range(iters):
        eta = X @ b
        mu = 1 / (1 + np.exp(-eta))
        W = mu * (1 - mu)
        zwork = eta + (y - mu) / W
        b = np.linalg.lstsq(X * np.sqrt(W)[:, None], zwork * np.sqrt(W), rcond=None)[0]
    return b


def _saturated_mle(data):
    """Observed-data MLE of the S4 design with a saturated mechanism in (y, u)."""
    u, z, r = data.u[:, 0], data.z[:, 0], data.r
    y = np.nan_to_num(data.y)

    def nll(th):
        b, c = th[:3], th[3:]
        pi = lambda t: expit(c[0] + c[1] * t + c[2] * u + c[3] * t * u)
        p1 = expit(b[0] + b[1] * u + b[2] * z)
        obs = np.where(y == 1, p1, 1 - p1) * pi(y)
        mis = p1 * (1 - pi(1.0)) + (1 - p1) * (1 - pi(0.0))
        return -np.sum(np.where(r, np.log(obs), np.log(mis)))

    res = minimize(nll, np.r_[-0.5, 0.2, 0.7, 1.0, -2.0, 0.3, 0.0], method="BFGS", options={"gtol": 1e-9})
    return res.x[:3]


class TestCompleteCase:
    def test_noiseless_linear_exact(self, rng):
        x = rng.normal(size=(30, 2))
        beta = np.array([0.3, -1.2, 0.8])
        y = beta[0] + x @ beta[1:]
        data = Dataset(np.ones(30, bool), y, None, x)
        npt.assert_allclose(complete_case_fit(data, OutcomeModel("linear_gaussian", 2)), beta, atol=1e-12)

    def test_symmetric_logistic_design_has_zero_intercept(self):
        x = np.array([[-2.0], [-1.0], [-1.0], [1.0], [1.0], [2.0]])
        y = np.array([0.0, 0.0, 1.0, 0.0, 1.0, 1.0])
        data = Dataset(np.ones(6, bool), y, None, x)
        b = complete_case_fit(data, OutcomeModel("logistic_binary", 1))
        assert abs(b[0]) < 1e-12
        assert b[1] > 0

    def test_matches_irls_on_s4_draw(self):
        spec = scenario("S4")
        data = generate(spec, 3)
        b = complete_case_fit(data, spec.model())
        X = np.column_stack([np.ones(data.n_observed), data.x[data.r]])
        npt.assert_allclose(b, _irls(X, data.y[data.r]), rtol=1e-8, atol=1e-10)

    def test_ignores_missing_rows(self, s1_small):
        data, model = s1_small
        sub = data.subset(np.flatnonzero(data.r))
        npt.assert_array_equal(complete_case_fit(data, model), complete_case_fit(sub, model))

    def test_separation_raises(self):
        x = np.array([[-1.0], [-0.5], [0.5], [1.0]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        with pytest.raises(EstimationError, match="separation"):
            logistic_mle(x, y)

    def test_too_few_complete_cases(self):
        data = Dataset([True, False, False], [0.1, np.nan, np.nan], None, [[0.0], [1.0], [2.0]])
        with pytest.raises(EstimationError):
            complete_case_fit(data, OutcomeModel("linear_gaussian", 1))


class TestCovariateDensity:
    def test_normal_moments(self, rng):
        x = rng.normal(0.5, 0.5, (20_000, 1))
        data = Dataset(np.ones(x.shape[0], bool), x[:, 0], None, x)
        dfit = fit_covariate_density(data, "multivariate_normal")
        # sampling sds of the mean and the ML variance are sigma and sigma^2 sqrt(2) over sqrt(N)
        tol = 4 * np.array([0.5, 0.25 * np.sqrt(2)]) / np.sqrt(20_000)
        assert np.all(np.abs(dfit.alpha_hat - [0.5, 0.25]) < tol)

    def test_bernoulli_z_given_u_coefficients(self):
        spec = scenario("S4", N=20_000)
        data = generate(spec, 1)
        dfit = fit_covariate_density(data, "bernoulli_logistic_z_given_u")
        npt.assert_allclose(dfit.alpha_hat, [-1.5, 0.2], atol=0.08)

    @pytest.mark.parametrize("family", ["multivariate_normal", "bernoulli_logistic_z_given_u", "gaussian_z_given_u"])
    def test_influence_mean_zero(self, family):
        spec = scenario("S4" if family.startswith("bern") else "S3", N=3000)
        data = generate(spec, 2)
        dfit = fit_covariate_density(data, family)
        npt.assert_allclose(dfit.influence_phi(data.x).mean(axis=0), 0.0, atol=1e-8)

    def test_normal_gradient_matches_finite_differences(self, rng):
        dens = NormalDensity([0.2, -0.1], [[1.0, 0.3], [0.3, 0.5]])
        x = rng.normal(size=(7, 2))
        alpha = dens.alpha
        fd = np.empty((7, alpha.size))
        for k in range(alpha.size):
            h = 1e-6
            up, dn = alpha.copy(), alpha.copy()
            up[k] += h
            dn[k] -= h
            fd[:, k] = (dens.with_alpha(up).logpdf(x) - dens.with_alpha(dn).logpdf(x)) / (2 * h)
        npt.assert_allclose(dens.mle_score(x), fd, rtol=1e-6, atol=1e-9)

    def test_family_structure_checked(self, s1_small):
        data, _ = s1_small
        with pytest.raises(ValueError):
            fit_covariate_density(data, "bernoulli_logistic_z_given_u")
        with pytest.raises(ValueError):
            fit_covariate_density(data, "nope")


class TestEfficientScore:
    def test_observed_row_cancels_when_b_is_the_score(self):
        model = OutcomeModel("linear_gaussian", 1)
        grid = YGrid.gauss_hermite_affine(9, 0.0, 1.0)
        beta = np.array([0.1, 0.4])
        x = np.array([0.7])
        b = BSolution(grid, model.score(beta, grid.nodes, x[None, :]), 0.0, 1.0)
        obs = Observation(True, float(grid.nodes[3]), (), (0.7,))
        npt.assert_allclose(efficient_score(model, MechanismModel.logistic(1, 1), beta, b, obs), 0.0, atol=1e-14)

    def test_missing_row_near_zero_when_pi_at_clip(self):
        model = OutcomeModel("linear_gaussian", 1)
        grid = YGrid.gauss_hermite_affine(40, 0.0, 1.5)
        beta = np.array([0.1, 0.4])
        mech = MechanismModel.logistic(-50.0, 0.0)
        delta = mech.delta_clip
        b = BSolution(grid, np.ones((grid.m, 2)), 0.0, 1.0)
        out = efficient_score(model, mech, beta, b, Observation(False, None, (), (0.3,)))
        # -(delta int f_beta - delta int b f) / (1 - delta) with int f_beta = 0 and int b f = 1
        npt.assert_allclose(out, delta / (1 - delta), rtol=1e-9)
        assert np.abs(out).max() < 1e-5

    def test_matches_batched_scores(self, s1_small, working_mech):
        data, model = s1_small
        beta = np.array([0.25, -0.5])
        cfg = FitConfig(model, working_mech)
        batched = score_terms(beta, data, cfg)
        sol = solve_system(assemble_empirical(data, model, working_mech, beta, y_grid(model, data)))
        one = np.array([efficient_score(model, working_mech, beta, sol, o) for o in data.observations])
        npt.assert_allclose(one, batched, rtol=1e-10, atol=1e-12)


class TestFit:
    def test_root_certificate_and_psd(self):
        spec, data = _s1(5)
        res = fit(data, spec.fit_config())
        assert res.converged
        assert np.abs(estimating_fn(res.beta_hat, data, spec.fit_config())).max() < 1e-8
        npt.assert_allclose(res.covariance, res.covariance.T)
        assert np.all(np.linalg.eigvalsh(res.covariance) >= 0)
        assert np.all(res.std_errors > 0)
        npt.assert_allclose(res.std_errors, np.sqrt(np.diag(res.covariance)))
        assert res.diagnostics["max_fredholm_residual"] < 1e-8

    def test_permutation_invariance(self):
        spec, data = _s1(6)
        perm = np.random.default_rng(1).permutation(data.N)
        a = fit(data, spec.fit_config(variance="none"))
        b = fit(data.subset(perm), spec.fit_config(variance="none"))
        assert np.abs(a.beta_hat - b.beta_hat).max() < 1e-10

    def test_no_missingness_matches_complete_data_mle(self, rng):
        N = 2000
        data, model = make_linear_data(rng, N, c=(40.0, 0.0))
        assert data.r.all()
        # pi* = 1 - delta leaves a denominator of 1e-6, so the outcome rule must be accurate beyond that
        res = fit(data, FitConfig(model, MechanismModel.logistic(40.0, 0.0), grid_size=40))
        cc = complete_case_fit(data, model)
        assert np.all(np.abs(res.beta_hat - cc) < 2 * res.std_errors / np.sqrt(N) + 1e-12)

    def test_s4_empirical_equals_saturated_mle(self):
        spec = scenario("S4", N=4000)
        data = generate(spec, replicate_seed(0, 0))
        mle = _saturated_mle(data)
        for correct in (True, False):
            res = fit(data, spec.fit_config(correct=correct, variance="none"))
            npt.assert_allclose(res.beta_hat, mle, atol=1e-5)

    def test_stratified_equals_manual_split(self):
        spec = scenario("S4", N=1500)
        data = generate(spec, 4)
        cfg = spec.fit_config(variance="none")
        res = fit(data, cfg)
        parts = [data.subset(np.flatnonzero(data.u[:, 0] == k)) for k in (0.0, 1.0)]
        shares = [p.N / data.N for p in parts]
        joint = lambda b: sum(s * estimating_fn(b, p, cfg) for s, p in zip(shares, parts))
        sol = root(joint, complete_case_fit(data, cfg.model), method="hybr", options={"xtol": 1e-13})
        assert sol.success
        npt.assert_allclose(res.beta_hat, sol.x, atol=1e-8)

    def test_oracle_and_empirical_merge_with_n(self):
        gaps = []
        for N in (1000, 10_000):
            spec, data = _s1(7, N)
            a = fit(data, spec.fit_config("empirical", variance="none")).beta_hat
            b = fit(data, spec.fit_config("oracle", variance="none")).beta_hat
            gaps.append(np.abs(a - b).max())
        assert gaps[1] < gaps[0]

    def test_non_identified_roots_are_avoided(self):
        # this replicate has a second root on the line beta1 = 0, reached first from the CC start
        spec = scenario("S1", correct=False)
        data = generate(spec, replicate_seed(2024, 20))
        res = fit(data, spec.fit_config(variance="none"))
        assert res.converged
        assert abs(res.beta_hat[1]) > 0.1
        assert res.diagnostics["restarts"] > 0

    def test_explicit_start_reported_as_non_identified(self):
        spec = scenario("S1", correct=False)
        data = generate(spec, replicate_seed(2024, 20))
        res = fit(data, spec.fit_config(variance="none"), beta0=[1.8, 0.0])
        assert not res.converged
        assert "vanishing" in res.diagnostics["failure"]

    def test_iteration_limit_reported(self):
        spec, data = _s1(8)
        res = fit(data, spec.fit_config(max_iter=1, variance="none"))
        assert not res.converged
        assert res.std_errors is None
        assert "iteration" in res.diagnostics["failure"]

    def test_special_rejects_mechanism_in_u(self, s1_small):
        _, model = s1_small
        with pytest.raises(ValueError, match="special"):
            FitConfig(model, MechanismModel.logistic(1.0, 1.0, [0.5]))

    @pytest.mark.parametrize("variant", ["general_empirical", "nonparametric_kde", "parametric_fx", "oracle"])
    def test_other_variants_converge_on_s3(self, variant):
        spec = scenario("S3", N=400)
        data = generate(spec, 9)
        res = fit(data, spec.fit_config(variant))
        assert res.converged
        assert np.all(np.abs(res.beta_hat - np.asarray(spec.truth)) < 5 * res.std_errors)


class TestSandwich:
    def test_h_terms_match_weight_perturbation(self):
        spec, data = _s1(10, N=60)
        cfg = spec.fit_config()
        beta = np.asarray(spec.truth)
        plan = build_plan(prepare_data(data, cfg), cfg)
        ev = evaluate(plan, beta, want_h=True)
        eps = 1e-6
        for i in (0, 7, 33):
            out = []
            for e in (eps, -eps):
                w = (1 - e) * plan.weights + e * plan.N * plan.weights * (plan.owner == i)
                out.append(evaluate(replace(plan, weights=w), beta).scores.mean(0))
            npt.assert_allclose(ev.h_terms[i], -(out[0] - out[1]) / (2 * eps), rtol=1e-6, atol=1e-9)

    def test_h_mean_zero(self):
        spec, data = _s1(11, N=20_000)
        cfg = spec.fit_config()
        plan = build_plan(prepare_data(data, cfg), cfg)
        h = evaluate(plan, np.asarray(spec.truth), want_h=True).h_terms
        assert np.all(np.abs(h.mean(0)) < 4 * h.std(0) / np.sqrt(data.N))

    @pytest.mark.parametrize("correct", [True, False])
    def test_parametric_correction_identity(self, correct):
        # differentiating E_alpha S*(alpha) = 0 gives dS*/dalpha + S* s_alpha with mean zero per row;
        # the correction term C phi relies on this identity
        spec = scenario("S1", N=20_000, correct=correct)
        data = generate(spec, 12)
        dens = spec.oracle_density()
        cfg = spec.fit_config("oracle")
        beta = np.asarray(spec.truth)
        S = score_terms(beta, data, cfg)
        s_alpha = dens.system_score(data.x)
        alpha = dens.alpha
        for k in range(alpha.size):
            h = 1e-4
            up, dn = alpha.copy(), alpha.copy()
            up[k] += h
            dn[k] -= h
            dS = (
                score_terms(beta, data, replace(cfg, density=dens.with_alpha(up)))
                - score_terms(beta, data, replace(cfg, density=dens.with_alpha(dn)))
            ) / (2 * h)
            q = dS + S * s_alpha[:, [k]]
            assert np.all(np.abs(q.mean(0)) < 4 * q.std(0) / np.sqrt(data.N))

    def test_public_sandwich_equals_attached(self):
        spec, data = _s1(13)
        cfg = spec.fit_config()
        res = fit(data, cfg)
        cov, A, B = sandwich(data, res, cfg)
        npt.assert_allclose(cov, res.covariance, rtol=1e-12)
        npt.assert_allclose(A, res.A_hat, rtol=1e-12)

    def test_needs_converged_fit(self):
        spec, data = _s1(8)
        res = fit(data, spec.fit_config(max_iter=1, variance="none"))
        with pytest.raises(EstimationError):
            sandwich(data, res, spec.fit_config())


class TestBootstrap:
    def test_seed_reproducible(self):
        spec, data = _s1(14, N=150)
        cfg = spec.fit_config()
        a = bootstrap_variance(data, cfg, 50, seed=3)
        b = bootstrap_variance(data, cfg, 50, seed=3)
        npt.assert_array_equal(a, b)

    def test_identical_rows_give_zero(self):
        data = Dataset(np.ones(20, bool), np.full(20, 0.3), None, np.full((20, 1), 0.5))
        cov = bootstrap_variance(data, FitConfig(OutcomeModel("linear_gaussian", 1), MechanismModel.logistic(1, 1)), 50)
        npt.assert_array_equal(cov, 0.0)

    def test_minimum_resamples(self, s1_small, working_mech):
        data, model = s1_small
        with pytest.raises(ValueError):
            bootstrap_variance(data, FitConfig(model, working_mech), 10)

    @pytest.mark.slow
    def test_sd_close_to_monte_carlo(self):
        spec, data = _s1(15)
        cov = bootstrap_variance(data, spec.fit_config(), 200, seed=1)
        # Monte Carlo sd of beta0 across replicate datasets at N = 500
        assert 0.8 * 0.2088 <= np.sqrt(cov[0, 0]) <= 1.2 * 0.2088
