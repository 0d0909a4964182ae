import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_continuous_lyapunov

from implicit_sa.core import RngStream, SolverError, deterministic_oracle
from implicit_sa.models import expfam_simulate_stat, sigmoid
from implicit_sa.solvers import (
    CovarianceProblem,
    InnerRmConfig,
    LambdaSolveError,
    StabilityError,
    closed_form_sigma,
    grid_lambda,
    inner_rm,
    lyapunov_residual,
    lyapunov_sigma,
    solve_lambda,
)


def _identity_sim(theta, k, rng):
    return theta


class TestInnerRm:
    def test_converges_to_ideal_step_on_deterministic_field(self):
        # ideal step of h(t) = t - 1 from 0 with gamma 1 is 0.5
        oracle = deterministic_oracle(lambda t: t - 1.0)
        out = inner_rm(0.0, 1.0, oracle, InnerRmConfig(K=2000, a1=0.5), RngStream(0))
        assert out == pytest.approx(0.5, abs=1e-3)

    def test_first_step_with_unit_gain_lands_on_explicit_step(self):
        oracle = deterministic_oracle(lambda t: t - 1.0)
        out = inner_rm(0.0, 3.0, oracle, InnerRmConfig(K=1, a1=1.0), RngStream(0))
        assert out == pytest.approx(3.0)

    def test_guard(self):
        oracle = deterministic_oracle(lambda t: t - 1.0)
        with pytest.raises(SolverError):
            inner_rm(0.0, 1e6, oracle, InnerRmConfig(K=50, a1=10.0), RngStream(0), guard_bound=1e3)

    def test_vector(self):
        oracle = deterministic_oracle(lambda t: t - np.array([1.0, 2.0]), dim=2)
        out = inner_rm(np.zeros(2), 1.0, oracle, InnerRmConfig(K=2000, a1=0.5), RngStream(0))
        assert np.allclose(out, [0.5, 1.0], atol=1e-3)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            InnerRmConfig(K=0)
        with pytest.raises(ValueError):
            InnerRmConfig(a1=0.0)


class TestSolveLambda:
    def test_linear_score(self):
        # s(t) = t, u = 1: lam * 1 = 1 - lam  ->  lam = 1/2
        res = solve_lambda(1.0, 1.0, lambda t: t, 1.0)
        assert res.lam == pytest.approx(0.5, abs=1e-10)
        assert res.residual <= 1e-10

    def test_zero_rate_gives_one(self):
        res = solve_lambda(0.7, 0.0, lambda t: math.exp(t) - 1.0, 1.0)
        assert res.lam == pytest.approx(1.0, abs=1e-10)

    def test_zero_score_closed_form(self):
        res = solve_lambda(0.0, 2.0, lambda t: t, 1.0)
        assert res.lam == 1.0 and res.method == "closed_form"

    def test_exponential_score_against_grid_scan(self):
        s = lambda t: math.exp(t) - 1.0
        res = solve_lambda(1.0, 1.0, s, 1.0)
        s0 = math.e - 1.0
        grid = np.linspace(0.0, 1.0, 1_000_001)
        resid = np.abs(grid * s0 - (np.exp(1.0 - grid * s0) - 1.0))
        expected = grid[np.argmin(resid)]
        assert 0.0 < res.lam <= 1.0
        assert res.lam == pytest.approx(expected, abs=1e-6)
        assert res.residual <= 1e-10

    def test_unit_direction_required(self):
        with pytest.raises(ValueError, match="unit norm"):
            solve_lambda(0.0, 1.0, lambda t: float(np.sum(t)) + 1.0, np.array([1.0, 1.0]))

    def test_vector_direction(self):
        u = np.array([0.6, 0.8])
        a = np.array([1.0, 2.0])
        # s(t) = a . t, increasing along u
        res = solve_lambda(np.array([1.0, 1.0]), 0.5, lambda t: float(a @ t), u)
        s0 = 3.0
        expected = s0 / (s0 + 0.5 * s0 * float(a @ u))
        assert res.lam == pytest.approx(expected, abs=1e-10)

    def test_decreasing_score_outside_unit_interval(self):
        # s(t) = -t makes lam = 1 / (1 - gamma) > 1 for gamma = 0.5
        res = solve_lambda(1.0, 0.5, lambda t: -t, 1.0)
        assert res.lam == pytest.approx(2.0, abs=1e-9)

    def test_no_root_raises(self):
        # s(t) = 1 + t^2 from 0: lam - 1 - lam^2 < 0 for every lam
        with pytest.raises(LambdaSolveError):
            solve_lambda(0.0, 1.0, lambda t: 1.0 + t * t, 1.0)

    def test_tiny_score_is_not_solved_at_zero(self):
        res = solve_lambda(0.0, 2.0, lambda t: 2 * t - 1e-200, 1.0)
        assert res.lam == pytest.approx(0.2, abs=1e-9)

    @settings(max_examples=300, deadline=None)
    @given(
        st.floats(0.01, 10.0),
        st.floats(0.0, 5.0),
        st.floats(-3, 3),
        st.floats(-3, 3),
        st.floats(-5, 5),
        st.floats(0.0, 100.0),
        st.sampled_from([-1.0, 1.0]),
    )
    def test_monotone_scores_land_in_unit_interval(self, a, b, c, d, prev, gamma, u):
        # u * s is nondecreasing along u, the convex-potential case
        s = lambda t: u * (a * (t - c) + b * math.tanh(t - d))
        res = solve_lambda(prev, gamma, s, u)
        assert 0.0 < res.lam <= 1.0 + 1e-12
        assert res.residual <= 1e-10

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-5, 5), st.floats(-3, 3), st.sampled_from([0.0, 1.0]), st.floats(0.0, 200.0))
    def test_logistic_scores(self, prev, x, y, gamma):
        if abs(x) < 1e-6:
            return
        s = lambda t: (sigmoid(t * x) - y) * abs(x)
        res = solve_lambda(prev, gamma, s, math.copysign(1.0, x))
        assert 0.0 < res.lam <= 1.0 + 1e-12
        assert res.residual <= 1e-10


class TestGridLambda:
    def test_hand_enumeration(self):
        # S(prev) = 2, theta(lam) = 2 - 2 lam, objective (4 lam - 2)^2
        res = grid_lambda(2.0, 1.0, 0.0, _identity_sim, k=1, m=2, rng=RngStream(0))
        assert res.objectives == pytest.approx((4.0, 0.0, 4.0))
        assert res.lam == 0.5
        assert res.residual == 0.0

    def test_zero_rate_picks_one(self):
        res = grid_lambda(2.0, 0.0, 0.0, _identity_sim, k=1, m=4, rng=RngStream(0))
        assert res.lam == 1.0

    def test_ties_go_to_smaller_lambda(self):
        res = grid_lambda(0.0, 1.0, 0.0, lambda t, k, r: 0.0, k=1, m=3, rng=RngStream(0))
        assert res.objectives == (0.0, 0.0, 0.0, 0.0)
        assert res.lam == 0.0

    def test_rejects_bad_grid(self):
        with pytest.raises(ValueError):
            grid_lambda(0.0, 1.0, 0.0, _identity_sim, k=1, m=0, rng=RngStream(0))

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(-3, 3),
        st.floats(0.0, 20.0),
        st.sampled_from([0.0, 1.0]),
        st.integers(1, 60),
        st.integers(1, 12),
        st.integers(0, 2**32 - 1),
    )
    def test_exhaustive_optimum_bernoulli(self, prev, gamma, s_obs, k, m, seed):
        rng = RngStream(seed, 3)
        res = grid_lambda(prev, gamma, s_obs, expfam_simulate_stat, k, m, rng)
        s_prev = expfam_simulate_stat(prev, k, rng.child(0))
        objs = []
        for j in range(m + 1):
            lam = j / m
            theta = prev + gamma * (s_obs - lam * s_prev)
            objs.append((lam * s_prev - expfam_simulate_stat(theta, k, rng.child(j + 1))) ** 2)
        assert res.objectives == pytest.approx(tuple(objs), abs=0)
        assert res.residual == min(objs)
        assert res.lam == objs.index(min(objs)) / m


class TestCovariance:
    def test_scalar_unit(self):
        prob = CovarianceProblem([[1.0]], [[1.0]], 1.0)
        assert lyapunov_sigma(prob, [[1.0]])[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_diagonal(self):
        prob = CovarianceProblem(np.diag([1.0, 2.0]), np.eye(2), 1.0)
        sigma = lyapunov_sigma(prob, np.eye(2))
        assert np.allclose(sigma, np.diag([1.0, 1.0 / 3.0]), atol=1e-12)

    def test_unstable(self):
        prob = CovarianceProblem([[1.0]], [[1.0]], 0.4)
        with pytest.raises(StabilityError, match="stability condition violated"):
            lyapunov_sigma(prob, [[1.0]])

    def test_validation(self):
        with pytest.raises(ValueError):
            CovarianceProblem(np.eye(2), [[1.0, 2.0], [0.0, 1.0]], 1.0)
        with pytest.raises(ValueError):
            CovarianceProblem(np.eye(2), -np.eye(2), 1.0)
        with pytest.raises(ValueError):
            CovarianceProblem(np.eye(2), np.eye(3), 1.0)

    def test_closed_form_requires_commuting(self):
        J = np.array([[2.0, 1.0], [1.0, 2.0]])
        prob = CovarianceProblem(J, np.diag([1.0, 3.0]), 1.0)
        with pytest.raises(ValueError, match="commute"):
            closed_form_sigma(prob, prob.Xi)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(0.6, 5.0))
    def test_against_scipy(self, seed, p, gamma1):
        gen = np.random.default_rng(seed)
        B = gen.standard_normal((p, p))
        J = B @ B.T + np.eye(p)  # eigenvalues >= 1 so gamma1 > 1/2 is stable
        C = gen.standard_normal((p, p))
        Xi = C @ C.T
        prob = CovarianceProblem(J, Xi, gamma1)
        rhs = gamma1**2 * Xi
        sigma = lyapunov_sigma(prob, rhs)
        expected = solve_continuous_lyapunov(prob.drift, rhs)
        assert np.allclose(sigma, expected, atol=1e-8 * (1 + np.abs(expected).max()))
        assert lyapunov_residual(prob, sigma, rhs) <= 1e-8 * (1 + np.abs(rhs).max())
        assert np.allclose(sigma, sigma.T)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.floats(0.6, 5.0))
    def test_closed_form_matches_lyapunov_when_commuting(self, seed, p, gamma1):
        gen = np.random.default_rng(seed)
        Q, _ = np.linalg.qr(gen.standard_normal((p, p)))
        J = Q @ np.diag(gen.uniform(1.0, 3.0, p)) @ Q.T
        rhs = Q @ np.diag(gen.uniform(0.1, 2.0, p)) @ Q.T
        prob = CovarianceProblem(J, rhs, gamma1)
        assert np.allclose(closed_form_sigma(prob, rhs), lyapunov_sigma(prob, rhs), atol=1e-9)
