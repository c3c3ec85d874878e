"""Penalized EM tests: E step, block M steps, full fits."""
import numpy as np
import pytest
from scipy.optimize import minimize as sci_minimize

from helpers import (
    brute_force_responsibilities,
    random_data,
    random_params,
    separated_truth,
)
from stylealloc.errors import (
    AllZeroRow,
    DimensionMismatch,
    EmptyData,
    NoValidRestart,
)
from stylealloc.inference import (
    FitConfig,
    Responsibilities,
    e_step,
    fit,
    fit_gradient,
    m_step_gaussians,
    m_step_pi,
    m_step_theta,
    map_pattern_assignments,
)
from stylealloc.model import (
    GaussianComponent,
    LsaParams,
    ReturnObservation,
    StickBreakingBetas,
    StyleSimplex,
    log_posterior_unnorm,
    stick_break,
)
from stylealloc.sampler import SimConfig, sample_dataset


def _simple_dataset(n_points=120, seed=0, n_receivers=6, n_servers=3):
    truth = separated_truth(n_receivers, n_servers)
    cfg = SimConfig(
        n_styles=3,
        n_patterns=3,
        n_receivers=n_receivers,
        n_servers=n_servers,
        n_points_per_receiver=n_points,
        param_source="explicit",
        params=truth,
        rng_seed=seed,
    )
    data, latents = sample_dataset(truth, cfg)
    return truth, data, latents


class TestEStep:
    def test_matches_brute_force_posterior(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            k = int(rng.integers(1, 5))
            m = int(rng.integers(1, 5))
            params = random_params(k, m, 3, 2, 2, rng)
            data = random_data(params, 8, rng)
            resp = e_step(params, data)
            for n, obs in enumerate(data):
                ref = brute_force_responsibilities(
                    params, obs.location, obs.covariates, obs.receiver_id, obs.server_id
                )
                np.testing.assert_allclose(
                    resp.grid[n], ref, rtol=1e-10, atol=1e-12
                )

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        params = random_params(3, 2, 4, 2, 1, rng)
        data = random_data(params, 50, rng)
        resp = e_step(params, data)
        np.testing.assert_allclose(resp.r.sum(axis=1), 1.0, atol=1e-12)

    def test_container_rejects_bad_rows(self):
        with pytest.raises(DimensionMismatch):
            Responsibilities(np.array([[0.5, 0.4]]), 1, 2)
        with pytest.raises(DimensionMismatch):
            Responsibilities(np.array([[0.5, 0.5, 0.0]]), 1, 2)

    def test_marginal_views(self):
        r = np.array([[0.1, 0.2, 0.3, 0.4]])
        resp = Responsibilities(r, 2, 2)
        np.testing.assert_allclose(resp.grid, [[[0.1, 0.2], [0.3, 0.4]]])
        np.testing.assert_allclose(resp.pattern_marginals, [[0.4, 0.6]])


class TestMStepPi:
    def test_flat_prior_gives_normalized_counts(self):
        data = [
            ReturnObservation(0, 0, np.zeros(2), np.ones(1)),
            ReturnObservation(0, 0, np.zeros(2), np.ones(1)),
            ReturnObservation(1, 0, np.zeros(2), np.ones(1)),
        ]
        resp = Responsibilities(
            np.array(
                [
                    [0.6, 0.1, 0.2, 0.1],
                    [0.2, 0.2, 0.3, 0.3],
                    [0.25, 0.25, 0.25, 0.25],
                ]
            ),
            2,
            2,
        )
        pi = m_step_pi(resp, data, alpha0=1.0)
        # receiver 0 style counts: (0.6+0.1) + (0.2+0.2) = 1.1 and 0.9
        np.testing.assert_allclose(pi.pi[0], [1.1 / 2.0, 0.9 / 2.0], atol=1e-12)
        np.testing.assert_allclose(pi.pi[1], [0.5, 0.5], atol=1e-12)

    def test_prior_pulls_toward_uniform(self):
        data = [ReturnObservation(0, 0, np.zeros(2), np.ones(1))]
        resp = Responsibilities(np.array([[1.0, 0.0]]), 2, 1)
        flat = m_step_pi(resp, data, alpha0=1.0)
        smooth = m_step_pi(resp, data, alpha0=2.0)
        assert smooth.pi[0, 0] < flat.pi[0, 0]
        np.testing.assert_allclose(smooth.pi[0], [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    def test_missing_receiver_raises(self):
        data = [ReturnObservation(0, 0, np.zeros(2), np.ones(1))]
        resp = Responsibilities(np.array([[1.0, 0.0]]), 2, 1)
        with pytest.raises(AllZeroRow):
            m_step_pi(resp, data, alpha0=1.0, n_receivers=2)


class TestMStepTheta:
    def test_improves_weighted_block_objective(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            k, m = 3, 4
            params = random_params(k, m, 2, 2, 1, rng)
            data = random_data(params, 60, rng)
            resp = e_step(params, data)
            n_km = resp.grid.sum(axis=0)

            def block(betas):
                theta = np.maximum(stick_break(betas).theta, 1e-300)
                return float(np.sum(n_km * np.log(theta))) - 0.5 * float(
                    np.sum(betas.beta**2)
                )

            new_betas = m_step_theta(resp, params.betas)
            f0, f1 = block(params.betas), block(new_betas)
            assert f1 >= f0 - 1e-9 * (1.0 + abs(f0))
            assert np.all(np.diff(new_betas.beta, axis=0) > 0.0)

    def test_single_pattern_is_noop(self):
        rng = np.random.default_rng(3)
        params = random_params(2, 1, 2, 2, 1, rng)
        data = random_data(params, 10, rng)
        resp = e_step(params, data)
        assert m_step_theta(resp, params.betas) is params.betas


class TestMStepGaussians:
    def test_mean_update_matches_ridge_solution(self):
        # single style, single pattern, identity covariance: the mean
        # block has a closed-form penalized least-squares solution
        rng = np.random.default_rng(4)
        n, p = 80, 2
        x = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = rng.normal(size=(n, 2)) + x @ np.array([[1.0, 0.5], [2.0, -0.3]]).T
        data = [
            ReturnObservation(0, 0, y[i], x[i]) for i in range(n)
        ]
        comp = GaussianComponent.from_scales(np.zeros((2, p)), (1.0, 1.0), 0.0)
        params = LsaParams(
            betas=StickBreakingBetas(np.empty((1, 0))),
            pi=StyleSimplex(np.ones((1, 1))),
            components=(comp,),
            eta=np.zeros((1, 2, p)),
            delta=np.zeros((1, 2, p)),
        )
        resp = Responsibilities(np.ones((n, 1)), 1, 1)
        cfg = FitConfig(fit_offsets=False, mean_sweeps=1)
        comps, eta, delta = m_step_gaussians(resp, data, params, cfg)
        g = x.T @ x
        ridge = g + np.eye(p) / params.prior_scales**2
        expected = np.linalg.solve(ridge, x.T @ y).T
        np.testing.assert_allclose(comps[0].alpha, expected, rtol=1e-8, atol=1e-10)
        np.testing.assert_array_equal(eta, 0.0)
        np.testing.assert_array_equal(delta, 0.0)

    def test_covariance_update_matches_numeric_map(self):
        rng = np.random.default_rng(5)
        n = 150
        y = rng.multivariate_normal([0.0, 0.0], [[1.2, 0.4], [0.4, 0.8]], size=n)
        data = [ReturnObservation(0, 0, y[i], np.ones(1)) for i in range(n)]
        comp = GaussianComponent.from_scales(np.zeros((2, 1)), (1.0, 1.0), 0.0)
        params = LsaParams(
            betas=StickBreakingBetas(np.empty((1, 0))),
            pi=StyleSimplex(np.ones((1, 1))),
            components=(comp,),
            eta=np.zeros((1, 2, 1)),
            delta=np.zeros((1, 2, 1)),
        )
        resp = Responsibilities(np.ones((n, 1)), 1, 1)
        cfg = FitConfig(fit_offsets=False, mean_sweeps=1)
        comps, _, _ = m_step_gaussians(resp, data, params, cfg)
        alpha = comps[0].alpha
        resid = y - np.ones((n, 1)) @ alpha.T

        def neg_map(u):
            s1, s2, r = np.exp(u[0]), np.exp(u[1]), np.tanh(u[2])
            cov = np.array(
                [[s1 * s1, s1 * s2 * r], [s1 * s2 * r, s2 * s2]]
            )
            lam = np.linalg.inv(cov)
            quad = float(np.einsum("ni,ij,nj->", resid, lam, resid))
            val = -0.5 * (n * np.log(np.linalg.det(cov)) + quad)
            val += -np.log1p((s1 / params.halft_scale) ** 2)
            val += -np.log1p((s2 / params.halft_scale) ** 2)
            val += (params.lkj_eta - 1.0) * np.log1p(-r * r)
            return -val

        best = None
        for u0 in (np.zeros(3), np.array([0.2, -0.2, 0.3]), np.array([-0.5, 0.5, -0.4])):
            res = sci_minimize(neg_map, u0, method="Nelder-Mead",
                               options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
            if best is None or res.fun < best.fun:
                best = res
        s1, s2, r = np.exp(best.x[0]), np.exp(best.x[1]), np.tanh(best.x[2])
        expected = np.array([[s1 * s1, s1 * s2 * r], [s1 * s2 * r, s2 * s2]])
        np.testing.assert_allclose(comps[0].covariance, expected, rtol=1e-5, atol=1e-7)


class TestFit:
    def test_objective_never_decreases(self):
        for seed in range(5):
            truth, data, _ = _simple_dataset(n_points=40, seed=seed)
            cfg = FitConfig(max_iters=60, n_restarts=1, seed=seed, rel_tol=1e-9)
            report = fit(data, 2, 3, cfg)
            trace = np.array(report.objective_trace)
            slack = 1e-8 * (np.abs(trace[:-1]) + 1.0)
            assert np.all(np.diff(trace) >= -slack)
            assert report.diagnostics["rescues"] == 0

    def test_same_seed_is_bit_identical(self):
        _, data, _ = _simple_dataset(n_points=30, seed=7)
        cfg = FitConfig(max_iters=25, n_restarts=2, seed=3)
        a = fit(data, 2, 2, cfg)
        b = fit(data, 2, 2, cfg)
        np.testing.assert_array_equal(a.params.betas.beta, b.params.betas.beta)
        np.testing.assert_array_equal(a.params.pi.pi, b.params.pi.pi)
        np.testing.assert_array_equal(a.per_point_loglik, b.per_point_loglik)
        assert a.objective_trace == b.objective_trace

    def test_report_is_consistent(self):
        _, data, _ = _simple_dataset(n_points=30, seed=2)
        cfg = FitConfig(max_iters=40, n_restarts=2, seed=1)
        report = fit(data, 2, 3, cfg)
        assert report.objective == report.objective_trace[-1]
        assert report.n_iters == len(report.objective_trace) - 1
        assert len(report.restart_objectives) == 2
        assert report.objective == pytest.approx(max(report.restart_objectives))
        assert report.objective == pytest.approx(
            log_posterior_unnorm(report.params, data)
        )
        assert report.per_point_loglik.shape == (len(data),)

    def test_recovers_separated_pattern_means(self):
        truth, data, _ = _simple_dataset(n_points=200, seed=11)
        cfg = FitConfig(max_iters=150, n_restarts=2, seed=0, fit_offsets=False)
        report = fit(data, 3, 3, cfg)
        from helpers import align_means

        true_means = np.array([c.alpha[:, 0] for c in truth.components])
        fit_means = np.array([c.alpha[:, 0] for c in report.params.components])
        assert align_means(true_means, fit_means).max() < 0.15

    def test_rescue_revives_dead_pattern(self):
        truth, data, _ = _simple_dataset(n_points=60, seed=4)
        dead_comp = GaussianComponent.from_scales(
            np.array([[500.0], [500.0]]), (0.3, 0.3), 0.0
        )
        init = truth.replace(components=(dead_comp,) + truth.components[1:])
        cfg = FitConfig(
            max_iters=30,
            n_restarts=1,
            seed=0,
            init_scheme="user-supplied",
            init_params=init,
            fit_offsets=False,
        )
        report = fit(data, 3, 3, cfg)
        assert report.diagnostics["rescues"] >= 1
        assert np.isfinite(report.objective)
        # the rescued component should have moved back into the data range
        fitted = np.array([c.alpha[:, 0] for c in report.params.components])
        assert np.all(np.abs(fitted) < 50.0)

    def test_empty_data_raises(self):
        with pytest.raises(EmptyData):
            fit([], 2, 2)

    def test_receiver_gap_raises(self):
        data = [
            ReturnObservation(0, 0, np.zeros(2), np.ones(1)),
            ReturnObservation(2, 0, np.zeros(2), np.ones(1)),
        ]
        with pytest.raises(AllZeroRow):
            fit(data, 2, 2)

    def test_all_restarts_failing_raises(self):
        truth, data, _ = _simple_dataset(n_points=20, seed=5)
        bad_init = random_params(3, 3, 6, 3, 4, np.random.default_rng(0))
        cfg = FitConfig(
            n_restarts=2,
            init_scheme="user-supplied",
            init_params=bad_init,
        )
        with pytest.raises(NoValidRestart):
            fit(data, 3, 3, cfg)

    def test_config_validation(self):
        with pytest.raises(DimensionMismatch):
            FitConfig(init_scheme="nonsense")
        with pytest.raises(DimensionMismatch):
            FitConfig(init_scheme="user-supplied")
        with pytest.raises(DimensionMismatch):
            FitConfig(max_iters=0)
        with pytest.raises(DimensionMismatch):
            FitConfig(alpha0=-1.0)

    def test_prior_draw_init_scheme_runs(self):
        _, data, _ = _simple_dataset(n_points=40, seed=6)
        cfg = FitConfig(
            max_iters=30, n_restarts=2, seed=2, init_scheme="prior-draw"
        )
        report = fit(data, 2, 2, cfg)
        assert np.isfinite(report.objective)


class TestFitGradient:
    def test_improves_over_initialization(self):
        _, data, _ = _simple_dataset(n_points=40, seed=8)
        cfg = FitConfig(max_iters=200, n_restarts=1, seed=0)
        report = fit_gradient(data, 2, 3, cfg)
        assert report.objective_trace[-1] >= report.objective_trace[0]
        assert report.objective == pytest.approx(
            log_posterior_unnorm(report.params, data), rel=1e-10
        )

    def test_comparable_to_em_fit(self):
        _, data, _ = _simple_dataset(n_points=60, seed=9)
        em = fit(data, 2, 2, FitConfig(max_iters=200, n_restarts=2, seed=1))
        grad = fit_gradient(data, 2, 2, FitConfig(max_iters=400, n_restarts=2, seed=1))
        # both should land in the same objective neighborhood
        assert abs(em.objective - grad.objective) < 0.05 * abs(em.objective)


class TestMapAssignments:
    def test_argmax_of_responsibilities(self):
        _, data, _ = _simple_dataset(n_points=25, seed=10)
        report = fit(data, 2, 3, FitConfig(max_iters=20, n_restarts=1, seed=0))
        labels = map_pattern_assignments(report)
        assert labels.shape == (len(data), 2)
        flat = np.argmax(report.responsibilities.r, axis=1)
        np.testing.assert_array_equal(labels[:, 0], flat // 3)
        np.testing.assert_array_equal(labels[:, 1], flat % 3)
