"""Learning-rate schedules, random streams, oracles and the procedure engine."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np

DEFAULT_GUARD = 1e8
MODES = ("explicit", "implicit_ideal", "implicit_lambda", "implicit_inner_rm")


class ScheduleError(ValueError):
    pass


class SolverError(RuntimeError):
    """Raised when an implicit equation could not be solved to tolerance."""

    def __init__(self, message: str, residual: float = math.inf):
        super().__init__(message)
        self.residual = residual


class BracketError(SolverError):
    pass


# ---------------------------------------------------------------------------
# learning rates


@dataclass(frozen=True)
class LearningRate:
    """The schedule gamma_n = gamma1 * n**(-gamma)."""

    gamma1: float
    gamma: float = 1.0

    def __post_init__(self):
        _check_schedule(self.gamma1, self.gamma)

    def __call__(self, n: int) -> float:
        return self.gamma1 * n ** (-self.gamma)


def _check_schedule(gamma1: float, gamma: float) -> None:
    if not (math.isfinite(gamma1) and math.isfinite(gamma)):
        raise ScheduleError("schedule parameters must be finite")
    if gamma1 <= 0:
        raise ScheduleError(f"nonpositive scale: gamma1={gamma1!r} must be > 0")
    if gamma <= 0.5:
        raise ScheduleError(
            f"square-summability violated: gamma={gamma!r} must be > 1/2"
        )
    if gamma > 1:
        raise ScheduleError(
            f"divergent-sum condition violated: gamma={gamma!r} must be <= 1"
        )


def validate_schedule(gamma1: float, gamma: float) -> LearningRate:
    return LearningRate(float(gamma1), float(gamma))


def rate_at(rate: LearningRate, n: int) -> float:
    if n < 1:
        raise ValueError(f"rate index must be >= 1, got {n}")
    return rate.gamma1 * n ** (-rate.gamma)


# ---------------------------------------------------------------------------
# random streams


@dataclass(frozen=True)
class RngStream:
    """A reproducible substream keyed by ``(seed, stream_id, *path)``.

    Distinct keys give independent PCG64 streams (numpy ``SeedSequence``
    spawn keys); equal keys give bit-identical sequences.
    """

    seed: int
    stream_id: int = 0
    path: tuple = ()

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=(int(self.stream_id), *self.path)
        )
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))


RngLike = Union[RngStream, np.random.Generator, int]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")


# ---------------------------------------------------------------------------
# oracles and traces


@dataclass
class StochasticOracle:
    """Noisy access to a regression function h.

    ``draw(theta, gen)`` returns one realisation of W_theta with
    E[W_theta] = h(theta).  ``factored(gen)``, when given, draws the
    randomness of one query up front and returns ``(s, u)`` such that
    W_theta = s(theta) * u for every theta; it is what the one-dimensional
    lambda solver needs.
    """

    draw: Callable[[Any, np.random.Generator], Any]
    dim: int = 1
    exact_h: Optional[Callable[[Any], Any]] = None
    factored: Optional[Callable[[np.random.Generator], tuple]] = None
    theta_star: Optional[Any] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("oracle dimension must be positive")


def deterministic_oracle(h: Callable, dim: int = 1, theta_star=None) -> StochasticOracle:
    """Oracle whose draws equal h exactly (zero noise)."""
    return StochasticOracle(
        draw=lambda theta, gen: h(theta), dim=dim, exact_h=h, theta_star=theta_star
    )


@dataclass
class Trace:
    iterates: np.ndarray
    diverged: bool = False
    diverged_at: Optional[int] = None
    wall_time: float = 0.0
    solver_failures: int = 0
    info: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    @property
    def steps(self) -> int:
        return len(self.iterates) - 1

    def path(self, coord: int = 0) -> np.ndarray:
        return self.iterates[:, coord]

    def at(self, n: int) -> np.ndarray:
        """Iterate n, or the last recorded iterate if the run stopped earlier."""
        return self.iterates[min(n, len(self.iterates) - 1)]


def make_trace(values, dim: int, diverged_at: Optional[int], t0: float, **kw) -> Trace:
    it = np.asarray(values, dtype=float).reshape(-1, dim)
    return Trace(
        iterates=it,
        diverged=diverged_at is not None,
        diverged_at=diverged_at,
        wall_time=time.perf_counter() - t0,
        **kw,
    )


def exceeds(value, bound: float) -> bool:
    """Guard predicate: norm above ``bound`` or not finite."""
    if isinstance(value, float):
        return not (abs(value) <= bound)
    nrm = float(np.linalg.norm(value))
    return not (nrm <= bound)


# ---------------------------------------------------------------------------
# single steps


def as_scalar(value) -> float:
    """float() that also accepts size-one arrays."""
    return float(np.asarray(value, dtype=float).reshape(-1)[0]) if np.ndim(value) else float(value)


def rm_step(theta_prev, gamma_n: float, w):
    if np.shape(theta_prev) != np.shape(w):
        raise ValueError(
            f"dimension mismatch: theta {np.shape(theta_prev)} vs field {np.shape(w)}"
        )
    if isinstance(theta_prev, (float, int)):
        return theta_prev - gamma_n * w
    return np.asarray(theta_prev, dtype=float) - gamma_n * np.asarray(w, dtype=float)


def bisect_root(g: Callable[[float], float], lo: float, hi: float,
                tol: float = 1e-10, max_iter: int = 200):
    """Bisection for an increasing-or-decreasing g with g(lo), g(hi) of opposite sign.

    Stops once |g(mid)| <= tol.  Returns ``(root, |g(root)|, iterations)``;
    the root is the best point seen if ``max_iter`` runs out.
    """
    glo, ghi = g(lo), g(hi)
    if glo == 0.0:
        return lo, 0.0, 0
    if ghi == 0.0:
        return hi, 0.0, 0
    if glo * ghi > 0:
        raise BracketError(f"no sign change on [{lo}, {hi}]", min(abs(glo), abs(ghi)))
    best, best_res = (lo, abs(glo)) if abs(glo) < abs(ghi) else (hi, abs(ghi))
    it = 0
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm) < best_res:
            best, best_res = mid, abs(gm)
        if best_res <= tol or mid == lo or mid == hi:
            break
        if (gm < 0) == (glo < 0):
            lo, glo = mid, gm
        else:
            hi = mid
    return best, best_res, it


def illinois_root(g: Callable[[float], float], lo: float, hi: float,
                  tol: float = 1e-10, max_iter: int = 200):
    """Illinois false position: bracketed like bisection, superlinear on smooth g.

    Same contract as :func:`bisect_root`.
    """
    glo, ghi = g(lo), g(hi)
    if glo == 0.0:
        return lo, 0.0, 0
    if ghi == 0.0:
        return hi, 0.0, 0
    if glo * ghi > 0:
        raise BracketError(f"no sign change on [{lo}, {hi}]", min(abs(glo), abs(ghi)))
    best, best_res = (lo, abs(glo)) if abs(glo) < abs(ghi) else (hi, abs(ghi))
    side = 0
    it = 0
    for it in range(1, max_iter + 1):
        mid = (lo * ghi - hi * glo) / (ghi - glo)
        if not lo < mid < hi:
            mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm) < best_res:
            best, best_res = mid, abs(gm)
        if best_res <= tol or mid == lo or mid == hi:
            break
        if (gm < 0) == (glo < 0):
            lo, glo = mid, gm
            if side == -1:
                ghi *= 0.5
            side = -1
        else:
            hi, ghi = mid, gm
            if side == 1:
                glo *= 0.5
            side = 1
    return best, best_res, it


def _implicit_1d(theta_prev: float, gamma_n: float, h, tol: float,
                 max_expand: int = 60, max_iter: int = 200) -> float:
    def g(t):
        return t + gamma_n * float(h(t)) - theta_prev

    half = gamma_n * abs(float(h(theta_prev))) + 1.0
    lo, hi = theta_prev - half, theta_prev + half
    for _ in range(max_expand):
        if g(lo) <= 0.0 <= g(hi):
            break
        width = hi - lo
        lo, hi = lo - width / 2, hi + width / 2
    else:
        raise BracketError(
            "could not bracket the implicit equation; is h monotone?",
            min(abs(g(lo)), abs(g(hi))),
        )
    root, res, _ = bisect_root(g, lo, hi, tol, max_iter)
    if res > tol:
        raise SolverError(f"bisection stalled with residual {res:.3e}", res)
    return root


def _implicit_nd(theta_prev: np.ndarray, gamma_n: float, h, tol: float,
                 max_iter: int = 500) -> np.ndarray:
    theta = theta_prev.copy()
    h_cur = np.asarray(h(theta), dtype=float)
    lip = 0.0
    res = math.inf
    for _ in range(max_iter):
        resid = theta + gamma_n * h_cur - theta_prev
        res = float(np.linalg.norm(resid))
        if res <= tol:
            return theta
        step = resid / (1.0 + gamma_n * lip)
        new = theta - step
        h_new = np.asarray(h(new), dtype=float)
        moved = float(np.linalg.norm(new - theta))
        if moved > 0:
            lip = max(lip, float(np.linalg.norm(h_new - h_cur)) / moved)
        theta, h_cur = new, h_new
    raise SolverError(f"damped fixed-point iteration did not converge (residual {res:.3e})", res)


def ideal_implicit_step(theta_prev, gamma_n: float, h, tol: float = 1e-10):
    """Solve theta = theta_prev - gamma_n * h(theta) with h known exactly.

    Scalars are handled by bisection on the increasing map
    theta + gamma_n * h(theta); vectors by a damped fixed-point iteration
    whose damping 1 / (1 + gamma_n * L) uses a running Lipschitz estimate L.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if isinstance(theta_prev, (float, int)):
        return _implicit_1d(float(theta_prev), gamma_n, h, tol)
    arr = np.asarray(theta_prev, dtype=float)
    if arr.size == 1:
        root = _implicit_1d(float(arr.reshape(-1)[0]), gamma_n,
                            lambda t: np.asarray(h(np.full(arr.shape, t))).reshape(-1)[0],
                            tol)
        return np.full(arr.shape, root)
    return _implicit_nd(arr, gamma_n, h, tol)


# ---------------------------------------------------------------------------
# the procedure engine


@dataclass
class ProcedureConfig:
    horizon: int
    theta0: Any
    rate: LearningRate
    guard_bound: float = DEFAULT_GUARD
    mode: str = "explicit"
    tol: float = 1e-10
    inner: Any = None  # solvers.InnerRmConfig for the inner-RM mode

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.guard_bound > 0:
            raise ValueError("guard_bound must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")


def run_procedure(cfg: ProcedureConfig, oracle: StochasticOracle, rng: RngLike) -> Trace:
    """Run ``cfg.horizon`` steps of the selected update and record every iterate.

    A failed implicit solve is replaced by an explicit step at the previous
    iterate and counted in ``Trace.solver_failures``.
    """
    from . import solvers  # solvers imports core

    t0 = time.perf_counter()
    theta = np.array(cfg.theta0, dtype=float).reshape(-1)
    if theta.size != oracle.dim:
        raise ValueError(f"theta0 has dimension {theta.size}, oracle expects {oracle.dim}")
    if cfg.mode == "implicit_ideal" and oracle.exact_h is None:
        raise ValueError("implicit_ideal mode needs an oracle with exact_h")
    if cfg.mode == "implicit_lambda" and oracle.factored is None:
        raise ValueError("implicit_lambda mode needs an oracle with a factored draw")
    if cfg.mode == "implicit_inner_rm" and cfg.inner is None:
        raise ValueError("implicit_inner_rm mode needs cfg.inner")

    gen = as_generator(rng)
    draw = oracle.draw
    iterates = [theta.copy()]
    failures = 0
    diverged_at = None
    for n in range(1, cfg.horizon + 1):
        g_n = rate_at(cfg.rate, n)
        if cfg.mode == "explicit":
            theta = theta - g_n * np.asarray(draw(theta, gen), dtype=float)
        elif cfg.mode == "implicit_ideal":
            try:
                mid = ideal_implicit_step(theta, g_n, oracle.exact_h, cfg.tol)
            except SolverError:
                failures += 1
                mid = theta
            theta = theta - g_n * np.asarray(draw(mid, gen), dtype=float)
        elif cfg.mode == "implicit_lambda":
            s, u = oracle.factored(gen)
            u = np.asarray(u, dtype=float).reshape(-1)
            s0 = as_scalar(s(theta))
            try:
                lam = solvers.solve_lambda(theta, g_n, s, u, cfg.tol).lam
            except SolverError:
                failures += 1
                lam = 1.0
            theta = theta - g_n * lam * s0 * u
        else:
            try:
                theta = solvers.inner_rm(theta, g_n, oracle, cfg.inner, gen,
                                         guard_bound=cfg.guard_bound)
            except SolverError:
                failures += 1
                theta = theta - g_n * np.asarray(draw(theta, gen), dtype=float)
        iterates.append(theta.copy())
        if exceeds(theta, cfg.guard_bound):
            diverged_at = n
            break
    return make_trace(iterates, theta.size, diverged_at, t0, solver_failures=failures)
