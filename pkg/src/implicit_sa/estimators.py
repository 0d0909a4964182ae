"""Estimation procedures built from the core steps, solvers and models.

Every estimator returns a :class:`~implicit_sa.core.Trace`.  One-dimensional
recursions run on Python floats; data are drawn up front from the run's
generator so that paired runs on the same stream see the same data.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .core import (
    DEFAULT_GUARD,
    LearningRate,
    RngStream,
    SolverError,
    as_generator,
    make_trace,
)
from .models import QuantileOracle, expfam_simulate_stat
from .solvers import InnerRmConfig, grid_lambda, solve_lambda


def _rates(rate: LearningRate, N: int) -> list:
    n = np.arange(1, N + 1, dtype=float)
    return (rate.gamma1 * n ** (-rate.gamma)).tolist()


def _as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError("simulation-based estimators need an RngStream (or an integer seed)")


def _run_scalar(update, theta0: float, N: int, guard_bound: float, t0: float, **kw):
    """Drive ``theta = update(n, theta)`` for n = 1..N with the divergence guard."""
    theta = float(theta0)
    out = [theta]
    diverged_at = None
    for n in range(1, N + 1):
        theta = update(n, theta)
        out.append(theta)
        if not abs(theta) <= guard_bound:
            diverged_at = n
            break
    return make_trace(out, 1, diverged_at, t0, **kw)


# ---------------------------------------------------------------------------
# likelihood-based


def explicit_sgd(stream, rate: LearningRate, theta0: float, N: int, rng,
                 guard_bound: float = DEFAULT_GUARD):
    """theta_n = theta_{n-1} + gamma_n * grad log f(Y_n; X_n, theta_{n-1})."""
    t0 = time.perf_counter()
    xs, ys = stream.sample(as_generator(rng), N)
    xs, ys, g = xs.tolist(), ys.tolist(), _rates(rate, N)
    score = stream.score
    return _run_scalar(lambda n, th: th + g[n - 1] * score(th, xs[n - 1], ys[n - 1]),
                       theta0, N, guard_bound, t0)


def implicit_sgd(stream, rate: LearningRate, theta0: float, N: int, rng,
                 guard_bound: float = DEFAULT_GUARD, tol: float = 1e-10):
    """Implicit SGD through the scalar lambda fixed point.

    The field -grad log f is factored as s(theta) * u at each data point and
    theta_n = theta_{n-1} - gamma_n * lam_n * s(theta_{n-1}) * u.  A failed
    lambda solve falls back to the explicit step (lam = 1) and is counted.
    """
    t0 = time.perf_counter()
    xs, ys = stream.sample(as_generator(rng), N)
    xs, ys, g = xs.tolist(), ys.tolist(), _rates(rate, N)
    lams = [math.nan] * N
    failures = 0

    def update(n, th):
        nonlocal failures
        s, u = stream.factor(xs[n - 1], ys[n - 1])
        s0 = s(th)
        try:
            lam = solve_lambda(th, g[n - 1], s, u, tol).lam
        except SolverError:
            failures += 1
            lam = 1.0
        lams[n - 1] = lam
        return th - g[n - 1] * lam * s0 * u

    trace = _run_scalar(update, theta0, N, guard_bound, t0)
    trace.solver_failures = failures
    trace.info["lambdas"] = np.array(lams[: trace.steps])
    return trace


def closed_form_implicit_sgd(stream, rate: LearningRate, theta0: float, N: int, rng,
                             guard_bound: float = DEFAULT_GUARD):
    """Implicit SGD using the model's own implicit step (NLMS for normal linear)."""
    t0 = time.perf_counter()
    xs, ys = stream.sample(as_generator(rng), N)
    xs, ys, g = xs.tolist(), ys.tolist(), _rates(rate, N)
    step = stream.implicit_step
    return _run_scalar(lambda n, th: step(th, g[n - 1], xs[n - 1], ys[n - 1]),
                       theta0, N, guard_bound, t0)


# ---------------------------------------------------------------------------
# simulation-based (likelihood known up to a constant)


def sim_explicit(dataset, rate: LearningRate, k: int, theta0: float, steps: int, rng,
                 simulator=expfam_simulate_stat, guard_bound: float = DEFAULT_GUARD):
    """theta <- theta + gamma_n (S_i - S_hat(theta; k)), i uniform on the dataset.

    Step n simulates on substream ``rng.child(n, 0)``, the same substream
    :func:`sim_implicit` uses for S_hat(theta_{n-1}; k).
    """
    t0 = time.perf_counter()
    root = _as_stream(rng)
    data = np.asarray(dataset, dtype=float)
    idx = root.generator().integers(0, len(data), steps)
    obs, g = data[idx].tolist(), _rates(rate, steps)
    return _run_scalar(
        lambda n, th: th + g[n - 1] * (obs[n - 1] - simulator(th, k, root.child(n, 0))),
        theta0, steps, guard_bound, t0)


def sim_implicit(dataset, rate: LearningRate, k: int, m: int, theta0: float, steps: int,
                 rng, simulator=expfam_simulate_stat, guard_bound: float = DEFAULT_GUARD):
    """theta <- theta + gamma_n (S_i - lam_n S_hat(theta; k)) with lam_n from a grid search.

    ``info`` records the chosen lam_n and the objective reached at each step,
    which shows whether the grid is fine enough.
    """
    t0 = time.perf_counter()
    root = _as_stream(rng)
    data = np.asarray(dataset, dtype=float)
    idx = root.generator().integers(0, len(data), steps)
    obs, g = data[idx].tolist(), _rates(rate, steps)
    lams, objs = [], []

    def update(n, th):
        sub = root.child(n)
        res = grid_lambda(th, g[n - 1], obs[n - 1], simulator, k, m, sub)
        s_prev = simulator(th, k, sub.child(0))
        lams.append(res.lam)
        objs.append(res.residual)
        return th + g[n - 1] * (obs[n - 1] - res.lam * s_prev)

    trace = _run_scalar(update, theta0, steps, guard_bound, t0)
    trace.info["lambdas"] = np.array(lams)
    trace.info["objectives"] = np.array(objs)
    return trace


# ---------------------------------------------------------------------------
# likelihood-free


def likelihood_free_explicit(stream, T, rate: LearningRate, theta0: float, N: int, rng,
                             guard_bound: float = DEFAULT_GUARD):
    """theta_n = theta_{n-1} + gamma_n (S_n - T(theta_{n-1})).

    ``stream(gen, size)`` returns the observed statistics.
    """
    t0 = time.perf_counter()
    obs = np.asarray(stream(as_generator(rng), N), dtype=float).tolist()
    g = _rates(rate, N)
    return _run_scalar(lambda n, th: th + g[n - 1] * (obs[n - 1] - T(th)),
                       theta0, N, guard_bound, t0)


def quantile_rm(oracle: QuantileOracle, rate: LearningRate, theta0: float, N: int, rng,
                guard_bound: float = DEFAULT_GUARD, deterministic: bool = False):
    """theta_n = theta_{n-1} - gamma_n W_{theta_{n-1}}.

    With ``deterministic`` the query is replaced by its mean F(theta) - alpha.
    """
    t0 = time.perf_counter()
    alpha = oracle.alpha
    g = _rates(rate, N)
    if deterministic:
        h = oracle.h
        return _run_scalar(lambda n, th: th - g[n - 1] * h(th), theta0, N, guard_bound, t0)
    z = oracle.sampler(as_generator(rng), N).tolist()
    hit, miss = 1.0 - alpha, -alpha
    return _run_scalar(lambda n, th: th - g[n - 1] * (hit if z[n - 1] <= th else miss),
                       theta0, N, guard_bound, t0)


def quantile_implicit(oracle: QuantileOracle, rate: LearningRate, theta0: float, N: int,
                      inner: InnerRmConfig = InnerRmConfig(), rng=0,
                      guard_bound: float = DEFAULT_GUARD, deterministic: bool = False):
    """Implicit quantile recursion with the inner Robbins-Monro approximation.

    Each outer step runs ``inner.K`` steps of
    x_k = x_{k-1} - a_k (gamma_n W_{x_{k-1}} + x_{k-1} - theta_{n-1}),
    a_k = a1 / k, from x_0 = theta_{n-1}, and sets theta_n = x_K.  The N*K
    draws of Z are taken from the generator in one block, in the order the
    inner steps consume them; this is the same recursion as
    :func:`implicit_sa.solvers.inner_rm` applied to the quantile oracle.
    """
    t0 = time.perf_counter()
    alpha = oracle.alpha
    K = inner.K
    a = [inner.a1 / k for k in range(1, K + 1)]
    g = _rates(rate, N)
    hit, miss = 1.0 - alpha, -alpha
    if deterministic:
        h = oracle.h
    else:
        z = oracle.sampler(as_generator(rng), N * K).tolist()
    theta = float(theta0)
    out = [theta]
    diverged_at = None
    j = 0
    for n in range(1, N + 1):
        gn = g[n - 1]
        x = theta
        for ak in a:
            if deterministic:
                w = h(x)
            else:
                w = hit if z[j] <= x else miss
                j += 1
            x = x - ak * (gn * w + x - theta)
            if not abs(x) <= guard_bound:
                break
        theta = x
        out.append(theta)
        if not abs(theta) <= guard_bound:
            diverged_at = n
            break
    return make_trace(out, 1, diverged_at, t0)


def is_stuck_high(trace, theta_star: float, margin: float = 2.0, flat_tol: float = 1e-3) -> bool:
    """Overshot and stalled: final > theta_star + margin and every increment over
    the second half of the run is smaller than ``flat_tol`` in magnitude."""
    path = trace.path()
    if trace.diverged or not path[-1] > theta_star + margin:
        return False
    tail = path[len(path) // 2:]
    return bool(np.all(np.abs(np.diff(tail)) < flat_tol))
