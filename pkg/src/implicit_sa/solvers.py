"""Approximate solvers for the implicit step and the asymptotic covariance equation.

Three ways to approximate the implicit update when h is unknown:

* ``inner_rm`` runs a short Robbins-Monro recursion on the fixed-point
  equation x + gamma_n * h(x) = theta_prev using fresh noisy queries;
* ``solve_lambda`` handles fields of the form W = s(theta) * u, where the
  implicit equation reduces to a scalar fixed point in a shrinkage factor;
* ``grid_lambda`` searches that shrinkage factor over {0, 1/m, ..., 1} when
  s is only available through simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import (
    DEFAULT_GUARD,
    BracketError,
    RngStream,
    SolverError,
    StochasticOracle,
    as_generator,
    as_scalar,
    illinois_root,
    exceeds,
)


class LambdaSolveError(SolverError):
    pass


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class LambdaSolve:
    lam: float
    residual: float
    iterations: int
    method: str  # "false_position", "closed_form" or "grid"
    objectives: Optional[tuple] = None  # grid method: objective at every grid point


@dataclass(frozen=True)
class InnerRmConfig:
    K: int = 50
    a1: float = 10.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.a1 > 0:
            raise ValueError("a1 must be positive")


@dataclass
class CovarianceProblem:
    J: np.ndarray
    Xi: np.ndarray
    gamma1: float

    def __post_init__(self):
        self.J = np.atleast_2d(np.asarray(self.J, dtype=float))
        self.Xi = np.atleast_2d(np.asarray(self.Xi, dtype=float))
        p = self.J.shape[0]
        if self.J.shape != (p, p) or self.Xi.shape != (p, p):
            raise ValueError("J and Xi must be square matrices of equal size")
        if not np.allclose(self.Xi, self.Xi.T, atol=1e-12):
            raise ValueError("Xi must be symmetric")
        if np.linalg.eigvalsh(self.Xi).min() < -1e-10:
            raise ValueError("Xi must be positive semidefinite")
        if not self.gamma1 > 0:
            raise ValueError("gamma1 must be positive")

    @property
    def p(self) -> int:
        return self.J.shape[0]

    @property
    def drift(self) -> np.ndarray:
        """gamma1 * J - I/2."""
        return self.gamma1 * self.J - 0.5 * np.eye(self.p)

    def is_stable(self) -> bool:
        return bool(np.linalg.eigvals(self.drift).real.min() > 0)


# ---------------------------------------------------------------------------


def inner_rm(theta_prev, gamma_n: float, oracle: StochasticOracle, cfg: InnerRmConfig,
             rng, guard_bound: float = DEFAULT_GUARD):
    """K steps of x_k = x_{k-1} - a_k (gamma_n W_{x_{k-1}} + x_{k-1} - theta_prev).

    a_k = a1 / k and every W is a fresh draw.  Raises ``SolverError`` if an
    inner iterate leaves the guard region.
    """
    gen = as_generator(rng)
    scalar = isinstance(theta_prev, (float, int))
    x0 = float(theta_prev) if scalar else np.asarray(theta_prev, dtype=float)
    x = x0
    for k in range(1, cfg.K + 1):
        w = oracle.draw(x, gen)
        if not scalar:
            w = np.asarray(w, dtype=float)
        x = x - (cfg.a1 / k) * (gamma_n * w + x - x0)
        if exceeds(x, guard_bound):
            raise SolverError(f"inner iterate left the guard region at k={k}", math.inf)
    return x


def _lambda_residual(lam, theta_prev, gamma_n, s, s0, u):
    return lam * s0 - as_scalar(s(theta_prev - gamma_n * lam * s0 * u))


def solve_lambda(theta_prev, gamma_n: float, s: Callable, u, tol: float = 1e-10,
                 max_iter: int = 200, max_expand: int = 60) -> LambdaSolve:
    """Solve lam * s(theta_prev) = s(theta_prev - gamma_n * lam * s(theta_prev) * u).

    The search starts on [0, 1], widens to [-2, 4] and then doubles until the
    residual changes sign.  ``theta_prev``/``u`` may be floats or arrays.
    """
    if isinstance(u, (float, int)):
        norm_u = abs(u)
    else:
        u = np.asarray(u, dtype=float)
        norm_u = float(np.linalg.norm(u))
    if abs(norm_u - 1.0) > 1e-12:
        raise ValueError(f"direction must have unit norm, got {norm_u}")
    s0 = as_scalar(s(theta_prev))
    if s0 == 0.0:
        return LambdaSolve(1.0, 0.0, 0, "closed_form")

    # dividing by s0 keeps a tiny s0 from passing the tolerance at lam = 0
    scale = abs(s0)
    rel_tol = tol / max(1.0, scale)

    def g(lam):
        return _lambda_residual(lam, theta_prev, gamma_n, s, s0, u) / scale

    lo, hi = 0.0, 1.0
    glo, ghi = g(lo), g(hi)
    if glo * ghi > 0:
        lo, hi = -2.0, 4.0
        for _ in range(max_expand):
            glo, ghi = g(lo), g(hi)
            if not (math.isfinite(glo) and math.isfinite(ghi)):
                break
            if glo * ghi <= 0:
                break
            lo, hi = 2 * lo, 2 * hi
        else:
            glo = ghi = math.nan
        if not (glo * ghi <= 0):
            best = min((abs(v) * scale for v in (glo, ghi) if math.isfinite(v)), default=math.inf)
            raise LambdaSolveError("no sign change for the lambda equation", best)
    try:
        lam, res, its = illinois_root(g, lo, hi, rel_tol, max_iter)
    except BracketError as exc:  # pragma: no cover - bracket checked above
        raise LambdaSolveError(str(exc), exc.residual * scale) from exc
    res *= scale
    if res > tol:
        raise LambdaSolveError(f"lambda solve stalled at residual {res:.3e}", res)
    return LambdaSolve(lam, res, its, "false_position")


def grid_lambda(theta_prev, gamma_n: float, s_obs, simulator: Callable, k: int, m: int,
                rng: RngStream) -> LambdaSolve:
    """Pick lam in {0, 1/m, ..., 1} minimising ||lam S(prev) - S(theta(lam))||^2.

    theta(lam) = theta_prev + gamma_n * (s_obs - lam * S(prev)), with S(.) the
    simulated statistic averaged over ``k`` draws.  S(prev) is simulated once on
    substream ``rng.child(0)`` and grid point j uses ``rng.child(j + 1)``.
    Ties go to the smaller lam.
    """
    if m < 1 or k < 1:
        raise ValueError("need m >= 1 and k >= 1")
    s_prev = np.asarray(simulator(theta_prev, k, rng.child(0)), dtype=float)
    s_obs = np.asarray(s_obs, dtype=float)
    objectives = []
    for j in range(m + 1):
        lam = j / m
        theta_j = theta_prev + gamma_n * (s_obs - lam * s_prev)
        s_j = np.asarray(simulator(theta_j, k, rng.child(j + 1)), dtype=float)
        objectives.append(float(np.sum((lam * s_prev - s_j) ** 2)))
    best = int(np.argmin(objectives))  # first minimum, i.e. smallest lam
    return LambdaSolve(best / m, objectives[best], m + 1, "grid", tuple(objectives))


# ---------------------------------------------------------------------------
# asymptotic covariance


def lyapunov_sigma(prob: CovarianceProblem, rhs) -> np.ndarray:
    """Solve (g1 J - I/2) S + S (g1 J - I/2)^T = rhs by vectorisation.

    Dense p^2 x p^2 elimination; fine for the p <= 10 problems used here.
    """
    A = prob.drift
    p = prob.p
    rhs = np.atleast_2d(np.asarray(rhs, dtype=float))
    if rhs.shape != (p, p):
        raise ValueError(f"rhs must be {p}x{p}")
    if not prob.is_stable():
        raise StabilityError("stability condition violated: gamma1*J - I/2 is not stable")
    eye = np.eye(p)
    # column-major vec: vec(A S) = (I kron A) vec S, vec(S A^T) = (A kron I) vec S
    op = np.kron(eye, A) + np.kron(A, eye)
    try:
        vec = np.linalg.solve(op, rhs.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise StabilityError("stability condition violated: singular system") from exc
    sigma = vec.reshape(p, p, order="F")
    return 0.5 * (sigma + sigma.T)


def lyapunov_residual(prob: CovarianceProblem, sigma, rhs) -> float:
    A = prob.drift
    return float(np.max(np.abs(A @ sigma + sigma @ A.T - rhs)))


def closed_form_sigma(prob: CovarianceProblem, rhs, commute_tol: float = 1e-10) -> np.ndarray:
    """(2 g1 J - I)^{-1} rhs, valid only when J and rhs commute."""
    J = prob.J
    rhs = np.atleast_2d(np.asarray(rhs, dtype=float))
    gap = float(np.max(np.abs(J @ rhs - rhs @ J)))
    if gap > commute_tol:
        raise ValueError(f"J and rhs do not commute (max |[J, rhs]| = {gap:.3e})")
    M = 2 * prob.gamma1 * J - np.eye(prob.p)
    if abs(np.linalg.det(M)) < 1e-14 or np.linalg.cond(M) > 1e14:
        raise StabilityError("2*gamma1*J - I is singular")
    sigma = np.linalg.solve(M, rhs)
    return 0.5 * (sigma + sigma.T)
