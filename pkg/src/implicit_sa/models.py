"""Statistical models: normal linear regression, logistic regression, quantiles,
and a Bernoulli exponential family with simulable sufficient statistic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable

import numpy as np

from .core import StochasticOracle, as_generator

SQRT2 = math.sqrt(2.0)


def _sign(x: float) -> float:
    return -1.0 if x < 0 else 1.0


def sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# normal linear model  Y | X ~ N(X theta*, noise_sd^2)


@dataclass(frozen=True)
class NormalLinearStream:
    theta_star: float
    x_dist: str = "standard_normal"  # or "fixed"
    x: float = 1.0
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.x_dist not in ("fixed", "standard_normal"):
            raise ValueError(f"unknown covariate distribution {self.x_dist!r}")
        # zero noise is allowed: the deterministic recursions are used as oracles
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")

    @property
    def x_second_moment(self) -> float:
        return self.x * self.x if self.x_dist == "fixed" else 1.0

    def sample(self, gen: np.random.Generator, size: int):
        if self.x_dist == "fixed":
            x = np.full(size, float(self.x))
        else:
            x = gen.standard_normal(size)
        eps = gen.standard_normal(size)
        return x, x * self.theta_star + self.noise_sd * eps

    def score(self, theta: float, x: float, y: float) -> float:
        """Gradient of the log-likelihood at one data point."""
        return (y - x * theta) * x

    def factor(self, x: float, y: float):
        """W_theta = s(theta) * u with u = sign(x) carrying the direction."""
        ax = abs(x)
        return (lambda theta: -(y - x * theta) * ax), _sign(x)

    def implicit_step(self, theta_prev: float, gamma_n: float, x: float, y: float) -> float:
        return normal_linear_implicit_step(theta_prev, gamma_n, x, y)

    def oracle(self) -> StochasticOracle:
        m2 = self.x_second_moment

        def draw(theta, gen):
            x, y = self.sample(gen, 1)
            return -(y[0] - x[0] * theta) * x[0]

        def factored(gen):
            x, y = self.sample(gen, 1)
            return self.factor(float(x[0]), float(y[0]))

        return StochasticOracle(
            draw=draw,
            dim=1,
            exact_h=lambda theta: m2 * (theta - self.theta_star),
            factored=factored,
            theta_star=self.theta_star,
        )


def normal_linear_explicit_step(theta_prev: float, gamma_n: float, x: float, y: float) -> float:
    """One least-mean-squares update."""
    return (1.0 - gamma_n * x * x) * theta_prev + gamma_n * y * x


def normal_linear_implicit_step(theta_prev: float, gamma_n: float, x: float, y: float) -> float:
    """One normalised least-mean-squares update; exact implicit step for this model."""
    d = 1.0 + gamma_n * x * x
    return theta_prev / d + gamma_n * y * x / d


def linear_implicit_step(theta_prev: np.ndarray, gamma_n: float, x: np.ndarray, y: float) -> np.ndarray:
    """Vector version: theta + gamma (y - x'theta) x / (1 + gamma ||x||^2)."""
    resid = y - float(x @ theta_prev)
    return theta_prev + (gamma_n * resid / (1.0 + gamma_n * float(x @ x))) * x


# ---------------------------------------------------------------------------
# logistic regression  P(Y=1 | X) = sigmoid(X theta*)


@dataclass
class LogisticStream:
    theta_star: float
    quad_nodes: int = 80
    _nodes: np.ndarray = field(init=False, repr=False)
    _weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes, weights = np.polynomial.hermite_e.hermegauss(self.quad_nodes)
        self._nodes = nodes
        self._weights = weights / math.sqrt(2 * math.pi)

    def sample(self, gen: np.random.Generator, size: int):
        x = gen.standard_normal(size)
        p = 1.0 / (1.0 + np.exp(-self.theta_star * x))
        y = (gen.random(size) < p).astype(float)
        return x, y

    def score(self, theta: float, x: float, y: float) -> float:
        return (y - sigmoid(theta * x)) * x

    def factor(self, x: float, y: float):
        ax = abs(x)
        return (lambda theta: (sigmoid(theta * x) - y) * ax), _sign(x)

    def implicit_step(self, theta_prev: float, gamma_n: float, x: float, y: float) -> float:
        return logistic_implicit_step(theta_prev, gamma_n, x, y)

    def potential(self, theta: float) -> float:
        """E[log(1 + exp(theta X)) - Y theta X] by Gauss-Hermite quadrature."""
        z = self._nodes
        t = theta * z
        softplus = np.logaddexp(0.0, t)
        p = 1.0 / (1.0 + np.exp(-self.theta_star * z))
        return float(np.sum(self._weights * (softplus - p * t)))


def logistic_implicit_step(theta_prev: float, gamma_n: float, x: float, y: float,
                           tol: float = 1e-13, max_iter: int = 60) -> float:
    """Solve t = theta_prev - gamma_n (sigmoid(t x) - y) x.

    Newton iterations safeguarded to the interval between theta_prev and the
    explicit step, which always brackets the root.
    """
    c = gamma_n * x
    if c == 0.0:
        return theta_prev

    def f(t):
        return t - theta_prev + c * (sigmoid(t * x) - y)

    explicit = theta_prev - c * (sigmoid(theta_prev * x) - y)
    lo, hi = min(theta_prev, explicit), max(theta_prev, explicit)
    if lo == hi:
        return lo
    t = 0.5 * (lo + hi)
    for _ in range(max_iter):
        ft = f(t)
        if abs(ft) <= tol * (1.0 + abs(t)):
            return t
        if ft > 0:
            hi = t
        else:
            lo = t
        sg = sigmoid(t * x)
        t_new = t - ft / (1.0 + c * x * sg * (1.0 - sg))
        if not lo < t_new < hi:
            t_new = 0.5 * (lo + hi)
        if t_new == t:
            return t
        t = t_new
    return t


# ---------------------------------------------------------------------------
# quantile estimation: W_theta = 1{Z <= theta} - alpha


@dataclass
class QuantileOracle:
    alpha: float
    cdf: Callable[[float], float]
    sampler: Callable[[np.random.Generator, int], np.ndarray]
    theta_star: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        gap = abs(self.cdf(self.theta_star) - self.alpha)
        if gap > 1e-9:
            raise ValueError(f"cdf(theta_star) differs from alpha by {gap:.3e}")

    def h(self, theta: float) -> float:
        return self.cdf(theta) - self.alpha

    def as_oracle(self) -> StochasticOracle:
        return StochasticOracle(
            draw=lambda theta, gen: quantile_query(self, theta, gen),
            dim=1,
            exact_h=self.h,
            theta_star=self.theta_star,
        )


def standard_normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / SQRT2)


def _standard_normal_sampler(gen: np.random.Generator, size: int) -> np.ndarray:
    return gen.standard_normal(size)


def standard_normal_quantile(alpha: float = 0.999) -> QuantileOracle:
    return QuantileOracle(
        alpha=alpha,
        cdf=standard_normal_cdf,
        sampler=_standard_normal_sampler,
        theta_star=NormalDist().inv_cdf(alpha),
    )


def quantile_query(oracle: QuantileOracle, theta: float, rng) -> float:
    z = float(oracle.sampler(as_generator(rng), 1)[0])
    return 1.0 - oracle.alpha if z <= theta else -oracle.alpha


# ---------------------------------------------------------------------------
# Bernoulli exponential family: f(s; theta) = exp(theta s) / (1 + exp(theta))


def expfam_mean(theta: float) -> float:
    return sigmoid(float(theta))


def expfam_inverse_mean(mean: float) -> float:
    if not 0.0 < mean < 1.0:
        raise ValueError("mean must lie in (0, 1)")
    return math.log(mean / (1.0 - mean))


def expfam_simulate_stat(theta: float, k: int, rng) -> float:
    """Average sufficient statistic of k draws simulated at ``theta``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gen = as_generator(rng)
    return gen.binomial(k, expfam_mean(theta)) / k


def expfam_sample(theta: float, size: int, rng) -> np.ndarray:
    gen = as_generator(rng)
    return (gen.random(size) < expfam_mean(theta)).astype(float)


@dataclass(frozen=True)
class ToyExpFamily:
    theta: float

    def mean(self) -> float:
        return expfam_mean(self.theta)

    def simulate_stat(self, k: int, rng) -> float:
        return expfam_simulate_stat(self.theta, k, rng)

    def sample(self, size: int, rng) -> np.ndarray:
        return expfam_sample(self.theta, size, rng)

    def stream(self):
        """Stream of fresh statistics, as ``(gen, size) -> array``."""
        return lambda gen, size: expfam_sample(self.theta, size, gen)


def resampling_stream(dataset) -> Callable[[np.random.Generator, int], np.ndarray]:
    """Finite-dataset mode: draw statistics uniformly with replacement."""
    data = np.asarray(dataset, dtype=float)
    return lambda gen, size: data[gen.integers(0, len(data), size)]
