import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.stats import norm

from implicit_sa.core import RngStream
from implicit_sa.models import (
    LogisticStream,
    NormalLinearStream,
    QuantileOracle,
    ToyExpFamily,
    expfam_inverse_mean,
    expfam_mean,
    expfam_simulate_stat,
    linear_implicit_step,
    logistic_implicit_step,
    normal_linear_explicit_step,
    normal_linear_implicit_step,
    quantile_query,
    resampling_stream,
    sigmoid,
    standard_normal_quantile,
)


class TestNormalLinear:
    def test_explicit_steps(self):
        first = normal_linear_explicit_step(0.0, 10.0, 1.0, 1.0)
        assert first == 10.0
        assert normal_linear_explicit_step(first, 5.0, 1.0, 1.0) == -35.0

    def test_implicit_step(self):
        assert normal_linear_implicit_step(0.0, 1.0, 1.0, 1.0) == pytest.approx(0.5)

    @settings(max_examples=200)
    @given(st.floats(-10, 10), st.floats(0, 1e4), st.floats(-5, 5), st.floats(-10, 10))
    def test_implicit_step_solves_its_equation(self, prev, gamma, x, y):
        t = normal_linear_implicit_step(prev, gamma, x, y)
        assert t == pytest.approx(prev + gamma * (y - x * t) * x, abs=1e-9 * (1 + abs(t)))

    @settings(max_examples=200)
    @given(st.floats(-10, 10), st.floats(0, 1e4), st.floats(-5, 5), st.floats(-10, 10))
    def test_implicit_step_is_a_convex_combination(self, prev, gamma, x, y):
        # theta_n lies between theta_{n-1} and y / x
        t = normal_linear_implicit_step(prev, gamma, x, y)
        if x == 0:
            assert t == prev
            return
        lo, hi = sorted((prev, y / x))
        assert lo - 1e-9 * (1 + abs(lo)) <= t <= hi + 1e-9 * (1 + abs(hi))

    def test_vector_step_matches_scalar(self):
        t = linear_implicit_step(np.array([0.0]), 1.0, np.array([1.0]), 1.0)
        assert t[0] == pytest.approx(0.5)

    def test_vector_step_solves_its_equation(self):
        gen = np.random.default_rng(0)
        x, prev, y = gen.standard_normal(3), gen.standard_normal(3), 0.7
        t = linear_implicit_step(prev, 2.0, x, y)
        assert np.allclose(t, prev + 2.0 * (y - x @ t) * x)

    def test_factor_reproduces_the_field(self):
        stream = NormalLinearStream(1.0)
        s, u = stream.factor(-2.0, 0.5)
        for theta in (-1.0, 0.0, 3.0):
            assert s(theta) * u == pytest.approx(-stream.score(theta, -2.0, 0.5))
        assert stream.factor(0.0, 1.0)[1] == 1.0

    def test_sample_shapes_and_fixed_design(self):
        x, y = NormalLinearStream(2.0, "fixed", x=1.5, noise_sd=0.0).sample(np.random.default_rng(0), 4)
        assert np.all(x == 1.5) and np.allclose(y, 3.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            NormalLinearStream(1.0, "uniform")
        with pytest.raises(ValueError):
            NormalLinearStream(1.0, noise_sd=-1.0)


class TestLogistic:
    def test_sigmoid_is_stable(self):
        assert sigmoid(-800.0) == 0.0 and sigmoid(800.0) == 1.0
        assert sigmoid(0.0) == 0.5

    @settings(max_examples=300)
    @given(st.floats(-10, 10), st.floats(0, 1e4), st.floats(-5, 5), st.sampled_from([0.0, 1.0]))
    def test_implicit_step_against_brentq(self, prev, gamma, x, y):
        t = logistic_implicit_step(prev, gamma, x, y)
        f = lambda v: v - prev + gamma * x * (sigmoid(v * x) - y)
        explicit = prev - gamma * x * (sigmoid(prev * x) - y)
        lo, hi = sorted((prev, explicit))
        assert lo <= t <= hi
        if hi - lo > 1e-12 and f(lo) * f(hi) < 0:
            ref = brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
            assert t == pytest.approx(ref, abs=1e-9 * (1 + abs(ref)))

    def test_potential_is_minimised_at_truth(self):
        model = LogisticStream(1.0)
        values = [model.potential(t) for t in (0.5, 0.9, 1.0, 1.1, 1.5)]
        assert min(values) == values[2]

    def test_potential_against_monte_carlo(self):
        model = LogisticStream(1.0)
        gen = np.random.default_rng(1)
        x = gen.standard_normal(400_000)
        p = 1 / (1 + np.exp(-x))
        vals = np.logaddexp(0, 2.0 * x) - p * 2.0 * x
        se = vals.std() / math.sqrt(len(x))
        assert abs(model.potential(2.0) - vals.mean()) < 4 * se

    def test_sample_frequency(self):
        x, y = LogisticStream(1.0).sample(np.random.default_rng(2), 100_000)
        assert y.mean() == pytest.approx(0.5, abs=0.01)  # symmetric design


class TestQuantile:
    def test_truth(self):
        q = standard_normal_quantile(0.999)
        assert q.theta_star == pytest.approx(norm.ppf(0.999), abs=1e-9)
        assert q.theta_star == pytest.approx(3.0902, abs=1e-4)

    def test_query_values(self):
        q = standard_normal_quantile(0.999)
        gen = np.random.default_rng(0)
        assert quantile_query(q, 100.0, gen) == pytest.approx(0.001)
        assert quantile_query(q, -100.0, gen) == pytest.approx(-0.999)

    def test_query_mean(self):
        q = standard_normal_quantile(0.9)
        gen = RngStream(4).generator()
        draws = np.array([quantile_query(q, 0.5, gen) for _ in range(20000)])
        assert draws.mean() == pytest.approx(q.h(0.5), abs=4 * 0.5 / math.sqrt(20000))

    def test_rejects_wrong_truth(self):
        with pytest.raises(ValueError):
            QuantileOracle(0.9, norm.cdf, lambda g, n: g.standard_normal(n), 1.0)
        with pytest.raises(ValueError):
            QuantileOracle(1.0, norm.cdf, lambda g, n: g.standard_normal(n), math.inf)


class TestExpFamily:
    @given(st.floats(-20, 20))
    def test_inverse_mean(self, theta):
        m = expfam_mean(theta)
        if 0 < m < 1:
            assert expfam_inverse_mean(m) == pytest.approx(theta, abs=1e-6)

    def test_inverse_mean_domain(self):
        with pytest.raises(ValueError):
            expfam_inverse_mean(1.0)

    def test_simulated_stat_on_the_grid(self):
        for seed in range(20):
            v = expfam_simulate_stat(0.3, 50, RngStream(seed))
            assert 0.0 <= v <= 1.0 and (v * 50) == pytest.approx(round(v * 50))

    def test_simulated_stat_mean(self):
        vals = [expfam_simulate_stat(1.0, 50, RngStream(0, i)) for i in range(4000)]
        sd = math.sqrt(expfam_mean(1.0) * (1 - expfam_mean(1.0)) / 50 / 4000)
        assert abs(np.mean(vals) - expfam_mean(1.0)) < 4 * sd

    def test_reproducible(self):
        assert expfam_simulate_stat(0.0, 10, RngStream(3)) == expfam_simulate_stat(0.0, 10, RngStream(3))
        with pytest.raises(ValueError):
            expfam_simulate_stat(0.0, 0, RngStream(3))

    def test_toy_family(self):
        fam = ToyExpFamily(math.log(3.0))
        assert fam.mean() == pytest.approx(0.75)
        draws = fam.stream()(np.random.default_rng(0), 10000)
        assert set(np.unique(draws)) <= {0.0, 1.0}
        assert draws.mean() == pytest.approx(0.75, abs=0.02)

    def test_resampling_stream(self):
        data = np.array([0.0, 1.0, 1.0])
        draws = resampling_stream(data)(np.random.default_rng(0), 3000)
        assert set(np.unique(draws)) <= {0.0, 1.0}
        assert draws.mean() == pytest.approx(2 / 3, abs=0.04)
