"""Monte Carlo diagnostics: error and deviance curves, rate fits, stability
scans and asymptotic-normality checks.

Replication ``r`` always runs on ``RngStream(seed, r)`` and results are
reduced in replication order, so the output does not depend on ``workers``.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np

from .core import DEFAULT_GUARD, LearningRate, RngStream, Trace, as_generator, make_trace
from .estimators import (
    closed_form_implicit_sgd,
    explicit_sgd,
    implicit_sgd,
    is_stuck_high,
    quantile_implicit,
    quantile_rm,
)
from .models import LogisticStream, NormalLinearStream, standard_normal_quantile
from .solvers import CovarianceProblem, InnerRmConfig, StabilityError, lyapunov_sigma

DEFAULT_CHECKPOINTS = (1_000, 3_000, 10_000, 30_000, 100_000)


def replicate(fn: Callable[[RngStream], object], replications: int, seed: int = 0,
              workers: int = 1) -> list:
    """Evaluate ``fn(RngStream(seed, r))`` for r = 0..replications-1, in order."""
    streams = [RngStream(seed, r) for r in range(replications)]
    if workers <= 1 or replications <= 1:
        return [fn(s) for s in streams]
    chunk = max(1, replications // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, streams, chunksize=chunk))


# ---------------------------------------------------------------------------
# curves and rate fits


@dataclass
class ErrorCurve:
    n: np.ndarray
    value: np.ndarray
    diverged: int = 0
    replications: int = 0
    stderr: Optional[np.ndarray] = None

    def __iter__(self):
        return iter(zip(self.n.tolist(), self.value.tolist()))

    def __len__(self):
        return len(self.n)


def _squared_errors(factory, theta_star, checkpoints, guard_bound, rng):
    trace = factory(rng)
    star = np.atleast_1d(np.asarray(theta_star, dtype=float))
    errs = []
    for n in checkpoints:
        if trace.diverged and n >= trace.diverged_at:
            errs.append(guard_bound ** 2)
        else:
            errs.append(float(np.sum((trace.at(n) - star) ** 2)))
    return np.array(errs), trace.diverged


def mse_curve(factory: Callable[[RngStream], Trace], theta_star, replications: int,
              checkpoints: Sequence[int], seed: int = 0, exclude_diverged: bool = False,
              guard_bound: float = DEFAULT_GUARD, workers: int = 1) -> ErrorCurve:
    """Monte Carlo estimate of E||theta_n - theta*||^2 at each checkpoint.

    A diverged replication counts ``guard_bound**2`` from its divergence step
    on, unless ``exclude_diverged`` drops it.  Either way it is tallied in
    ``ErrorCurve.diverged``.
    """
    if replications < 2:
        raise ValueError("need at least 2 replications")
    checkpoints = [int(c) for c in checkpoints]
    fn = partial(_squared_errors, factory, theta_star, checkpoints, guard_bound)
    results = replicate(fn, replications, seed, workers)
    rows = [e for e, d in results if not (exclude_diverged and d)]
    n_div = sum(1 for _, d in results if d)
    if not rows:
        nan = np.full(len(checkpoints), np.nan)
        return ErrorCurve(np.array(checkpoints), nan, n_div, replications, None)
    mat = np.array(rows)
    se = mat.std(axis=0, ddof=1) / math.sqrt(len(mat)) if len(mat) > 1 else None
    return ErrorCurve(np.array(checkpoints), mat.mean(axis=0), n_div, replications, se)


def _deviances(factory, potential, h_star, checkpoints, rng):
    trace = factory(rng)
    vals = [potential(float(trace.at(n)[0]) if trace.iterates.shape[1] == 1 else trace.at(n))
            - h_star for n in checkpoints]
    return np.array(vals), trace.diverged


def deviance_curve(potential: Callable, theta_star, factory: Callable[[RngStream], Trace],
                   replications: int, checkpoints: Sequence[int], seed: int = 0,
                   workers: int = 1) -> ErrorCurve:
    """Monte Carlo estimate of E[H(theta_n) - H(theta*)] at each checkpoint."""
    if replications < 2:
        raise ValueError("need at least 2 replications")
    checkpoints = [int(c) for c in checkpoints]
    star = theta_star if np.ndim(theta_star) else float(theta_star)
    fn = partial(_deviances, factory, potential, potential(star), checkpoints)
    results = replicate(fn, replications, seed, workers)
    mat = np.array([v for v, _ in results])
    se = mat.std(axis=0, ddof=1) / math.sqrt(len(mat))
    return ErrorCurve(np.array(checkpoints), mat.mean(axis=0),
                      sum(1 for _, d in results if d), replications, se)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    n_range: tuple


def fit_rate_slope(curve, n_min: float = 1e3, n_max: float = 1e5) -> RateFit:
    """Least-squares line through (log n, log value) for n in [n_min, n_max]."""
    pts = [(float(n), float(v)) for n, v in curve
           if n_min <= n <= n_max and v > 0 and math.isfinite(v)]
    if len(pts) < 5:
        raise ValueError(f"insufficient points for a rate fit: {len(pts)} < 5")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    ns = [p[0] for p in pts]
    return RateFit(float(slope), float(intercept), min(1.0, max(0.0, r2)), (min(ns), max(ns)))


# ---------------------------------------------------------------------------
# stability scans


@dataclass
class StabilityProblem:
    """Paired explicit/implicit estimators indexed by the rate constant gamma1.

    Each method maps ``(gamma1, N, rng) -> Trace``.
    """

    name: str
    theta_star: float
    methods: dict
    stuck: Optional[Callable[[Trace, float], bool]] = None


@dataclass(frozen=True)
class RunOutcome:
    gamma1: float
    method: str
    replication: int
    final_theta: float
    max_abs_theta: float
    diverged: bool
    stuck: bool


@dataclass(frozen=True)
class StabilityRow:
    gamma1: float
    method: str
    median_error: float
    diverged: int
    stuck: int


@dataclass
class ScanResult:
    rows: list
    runs: list = field(repr=False)


def _scan_replication(problem, gamma1_grid, N, rng):
    out = []
    for g1 in gamma1_grid:
        for name, run in problem.methods.items():
            tr = run(g1, N, rng)
            path = tr.path()
            stuck = bool(problem.stuck(tr, problem.theta_star)) if problem.stuck else False
            out.append(RunOutcome(float(g1), name, rng.stream_id, float(path[-1]),
                                  float(np.max(np.abs(path))), tr.diverged, stuck))
    return out


def run_grid(problem: StabilityProblem, gamma1_grid: Sequence[float], replications: int,
             N: int, seed: int = 0, workers: int = 1) -> list:
    """Every (gamma1, method) pair for every replication; ordered by gamma1, method,
    then replication.  All methods and grid values of replication r share
    ``RngStream(seed, r)``."""
    fn = partial(_scan_replication, problem, list(gamma1_grid), N)
    per_rep = replicate(fn, replications, seed, workers)
    order = {(g, m): i for i, (g, m) in enumerate(
        (float(g), m) for g in gamma1_grid for m in problem.methods)}
    flat = [o for rep in per_rep for o in rep]
    return sorted(flat, key=lambda o: (order[(o.gamma1, o.method)], o.replication))


def summarize(problem: StabilityProblem, runs: list) -> list:
    rows = []
    keys = list(dict.fromkeys((o.gamma1, o.method) for o in runs))
    for g1, name in keys:
        sel = [o for o in runs if o.gamma1 == g1 and o.method == name]
        err = np.median([abs(o.final_theta - problem.theta_star) for o in sel])
        rows.append(StabilityRow(g1, name, float(err), sum(o.diverged for o in sel),
                                 sum(o.stuck for o in sel)))
    return rows


def stability_scan(problem: StabilityProblem, gamma1_grid: Sequence[float],
                   replications: int, N: int, seed: int = 0, workers: int = 1) -> ScanResult:
    if not len(gamma1_grid):
        raise ValueError("gamma1 grid is empty")
    runs = run_grid(problem, gamma1_grid, replications, N, seed, workers)
    return ScanResult(summarize(problem, runs), runs)


def _stuck_quantile(flat_tol, trace, theta_star):
    return is_stuck_high(trace, theta_star, flat_tol=flat_tol)


def _quantile_rm_run(oracle, theta0, gamma, g1, N, rng):
    return quantile_rm(oracle, LearningRate(g1, gamma), theta0, N, rng)


def _quantile_implicit_run(oracle, theta0, gamma, inner, g1, N, rng):
    return quantile_implicit(oracle, LearningRate(g1, gamma), theta0, N, inner, rng)


def quantile_problem(alpha: float = 0.999, theta0: float = -10.0, gamma: float = 1.0,
                     K: int = 50, a1: float = 10.0, flat_tol: float = 1e-3) -> StabilityProblem:
    """Robbins-Monro versus inner-RM implicit quantile estimation for N(0, 1)."""
    oracle = standard_normal_quantile(alpha)
    inner = InnerRmConfig(K, a1)
    return StabilityProblem(
        "quantile",
        oracle.theta_star,
        {
            "rm": partial(_quantile_rm_run, oracle, theta0, gamma),
            "implicit": partial(_quantile_implicit_run, oracle, theta0, gamma, inner),
        },
        stuck=partial(_stuck_quantile, flat_tol),
    )


def _sgd_run(estimator, stream, theta0, gamma, g1, N, rng):
    return estimator(stream, LearningRate(g1, gamma), theta0, N, rng)


def normal_linear_problem(x: float = 1.0, noise_sd: float = 0.0, theta_star: float = 1.0,
                          theta0: float = 0.0, gamma: float = 1.0) -> StabilityProblem:
    """LMS (explicit SGD) versus implicit SGD on fixed-covariate normal regression."""
    stream = NormalLinearStream(theta_star, "fixed", x, noise_sd)
    return StabilityProblem(
        "normal-linear",
        theta_star,
        {
            "explicit": partial(_sgd_run, explicit_sgd, stream, theta0, gamma),
            "implicit": partial(_sgd_run, implicit_sgd, stream, theta0, gamma),
        },
    )


# ---------------------------------------------------------------------------
# asymptotic normality


@dataclass
class NormalityProblem:
    """An implicit procedure with known Jacobian J and noise covariance Xi at theta*.

    ``factory(rate, N, rng)`` runs one replication.
    """

    J: np.ndarray
    Xi: np.ndarray
    theta_star: np.ndarray
    factory: Callable


@dataclass
class NormalityReport:
    empirical_cov: np.ndarray
    theoretical: dict
    relative_errors: dict
    replications: int
    horizon: int
    matching_scaling: str

    @property
    def theoretical_cov(self) -> np.ndarray:
        key = "gamma1_squared" if self.matching_scaling == "both" else self.matching_scaling
        return self.theoretical[key]

    @property
    def relative_error(self) -> float:
        key = "gamma1_squared" if self.matching_scaling == "both" else self.matching_scaling
        return self.relative_errors[key]


def _relative_frobenius(emp, theo):
    denom = np.linalg.norm(theo)
    diff = np.linalg.norm(emp - theo)
    return float(diff / denom) if denom > 0 else float(diff)


def _scaled_error(problem, rate, N, rng):
    tr = problem.factory(rate, N, rng)
    return N ** (rate.gamma / 2) * (tr.iterates[-1] - problem.theta_star)


def normality_check(problem: NormalityProblem, rate: LearningRate, N: int,
                    replications: int, seed: int = 0, workers: int = 1) -> NormalityReport:
    """Empirical covariance of N^(gamma/2) (theta_N - theta*) against the Lyapunov solution.

    The equation's right-hand side is evaluated both as Xi ("unit") and as
    gamma1^2 Xi ("gamma1_squared"); the report names the closer one, or
    "both" when the two coincide.
    """
    if replications < 100:
        raise ValueError("normality check needs at least 100 replications")
    prob = CovarianceProblem(problem.J, problem.Xi, rate.gamma1)
    if not prob.is_stable():
        raise StabilityError("unstable configuration: gamma1*J - I/2 has an eigenvalue "
                             "with nonpositive real part")
    scaled = np.array(replicate(partial(_scaled_error, problem, rate, N), replications,
                                seed, workers))
    emp = np.atleast_2d(np.cov(scaled, rowvar=False))
    emp = 0.5 * (emp + emp.T)
    theo = {
        "unit": lyapunov_sigma(prob, prob.Xi),
        "gamma1_squared": lyapunov_sigma(prob, rate.gamma1 ** 2 * prob.Xi),
    }
    rel = {k: _relative_frobenius(emp, v) for k, v in theo.items()}
    same = np.allclose(theo["unit"], theo["gamma1_squared"], rtol=1e-12, atol=1e-15)
    match = "both" if same else min(rel, key=rel.get)
    return NormalityReport(emp, theo, rel, replications, N, match)


def _scalar_linear_factory(stream, theta0, rate, N, rng):
    return closed_form_implicit_sgd(stream, rate, theta0, N, rng)


def scalar_linear_normality(x: float = 1.0, noise_sd: float = 1.0, theta_star: float = 1.0,
                            theta0: float = 0.0) -> NormalityProblem:
    """Fixed-covariate normal regression: J = x^2, Xi = noise_sd^2 x^2."""
    stream = NormalLinearStream(theta_star, "fixed", x, noise_sd)
    return NormalityProblem(
        J=np.array([[x * x]]),
        Xi=np.array([[noise_sd ** 2 * x * x]]),
        theta_star=np.array([theta_star]),
        factory=partial(_scalar_linear_factory, stream, theta0),
    )


def implicit_linear_regression(theta_star, scales, noise_sd, theta0, rate: LearningRate,
                               N: int, rng) -> Trace:
    """Exact implicit SGD for y = x'theta* + noise with x_i = scales_i * N(0, 1)."""
    t0 = time.perf_counter()
    gen = as_generator(rng)
    scales = np.asarray(scales, dtype=float)
    p = len(scales)
    xs = gen.standard_normal((N, p)) * scales
    ys = xs @ np.asarray(theta_star, dtype=float) + noise_sd * gen.standard_normal(N)
    n = np.arange(1, N + 1)
    g = rate.gamma1 * n ** (-rate.gamma)
    theta = [float(v) for v in np.atleast_1d(theta0)]
    out = [list(theta)]
    for x, y, gn in zip(xs.tolist(), ys.tolist(), g.tolist()):
        resid = y - sum(a * b for a, b in zip(x, theta))
        c = gn * resid / (1.0 + gn * sum(a * a for a in x))
        theta = [t + c * a for t, a in zip(theta, x)]
        out.append(theta)
    return make_trace(out, p, None, t0)


def _vector_linear_factory(theta_star, scales, noise_sd, theta0, rate, N, rng):
    return implicit_linear_regression(theta_star, scales, noise_sd, theta0, rate, N, rng)


def diagonal_linear_normality(scales=(1.0, math.sqrt(2.0)), noise_sd: float = 1.0,
                              theta_star=(1.0, -1.0), theta0=(0.0, 0.0)) -> NormalityProblem:
    """Independent scaled covariates: J = diag(scales^2), Xi = noise_sd^2 J."""
    scales = np.asarray(scales, dtype=float)
    J = np.diag(scales ** 2)
    return NormalityProblem(
        J=J,
        Xi=noise_sd ** 2 * J,
        theta_star=np.asarray(theta_star, dtype=float),
        factory=partial(_vector_linear_factory, tuple(theta_star), tuple(scales),
                        noise_sd, tuple(theta0)),
    )


# ---------------------------------------------------------------------------
# built-in rate problems


def _horizon_factory(estimator, stream, rate, theta0, N, rng):
    return estimator(stream, rate, theta0, N, rng)


def linear_rate_factory(rate: LearningRate, N: int, theta_star: float = 1.0,
                        theta0: float = 0.0, noise_sd: float = 1.0, implicit: bool = True):
    """Replication factory for normal regression with standard-normal covariates."""
    stream = NormalLinearStream(theta_star, "standard_normal", 1.0, noise_sd)
    est = closed_form_implicit_sgd if implicit else explicit_sgd
    return partial(_horizon_factory, est, stream, rate, theta0, N)


def logistic_deviance_setup(rate: LearningRate, N: int, theta_star: float = 1.0,
                            theta0: float = 0.0):
    """Factory and potential for implicit SGD on logistic regression."""
    stream = LogisticStream(theta_star)
    factory = partial(_horizon_factory, closed_form_implicit_sgd, stream, rate, theta0, N)
    return factory, stream.potential
