"""Experiment configurations and the replication studies behind the ``sa`` CLI."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from typing import Optional

import numpy as np

from . import __version__
from .core import LearningRate, ScheduleError, validate_schedule
from .diagnostics import (
    deviance_curve,
    fit_rate_slope,
    linear_rate_factory,
    logistic_deviance_setup,
    mse_curve,
    normality_check,
    quantile_problem,
    replicate,
    run_grid,
    scalar_linear_normality,
)
from .estimators import closed_form_implicit_sgd, implicit_sgd, sim_explicit, sim_implicit
from .models import NormalLinearStream, expfam_sample

EXPERIMENTS = ("quantile-fig", "lms-compare", "rates", "normality", "sim-expfam")

COLUMNS = {
    "quantile-fig": ("gamma1", "method", "replication", "final_theta", "diverged", "stuck"),
    "rates": ("model", "gamma", "slope", "intercept", "r_squared", "n_min", "n_max"),
    "normality": ("scaling", "rel_error", "replications", "horizon"),
    "lms-compare": ("step", "max_abs_diff"),
    "sim-expfam": ("method", "gamma1", "replication", "final_theta", "max_abs_theta",
                   "diverged"),
}

RATE_MODELS = ("normal-linear", "normal-linear-explicit", "logistic-deviance")

# per-experiment defaults; anything not listed falls back to the dataclass default
DEFAULTS = {
    "quantile-fig": dict(replications=20, horizon=5000, gamma1_grid=[0.1, 1.0, 5.0, 20.0, 294.0],
                         alpha=0.999, theta0=-10.0, K=50, a1=10.0),
    "lms-compare": dict(replications=1, horizon=10_000, gamma1_grid=[1.0], theta0=0.0,
                        theta_star=1.0, noise_sd=1.0, x_dist="standard_normal"),
    "rates": dict(replications=500, horizon=100_000, gamma1_grid=[1.0], theta0=0.0,
                  theta_star=1.0, noise_sd=1.0, models=["normal-linear"]),
    "normality": dict(replications=2000, horizon=10_000, gamma1_grid=[1.0], theta0=0.0,
                      theta_star=1.0, noise_sd=1.0, x=1.0),
    "sim-expfam": dict(replications=20, horizon=2000, gamma1_grid=[1.0, 50.0], theta0=0.0,
                       theta_star=0.0, k=50, m=10, dataset_size=200),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    replications: int = 20
    horizon: int = 5000
    gamma1_grid: list = field(default_factory=lambda: [1.0])
    gamma: float = 1.0
    alpha: float = 0.999
    theta0: float = 0.0
    theta_star: float = 1.0
    K: int = 50
    a1: float = 10.0
    k: int = 50
    m: int = 10
    dataset_size: int = 200
    noise_sd: float = 1.0
    x: float = 1.0
    x_dist: str = "fixed"
    models: list = field(default_factory=lambda: ["normal-linear"])
    output_path: Optional[str] = None

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"choose from {', '.join(EXPERIMENTS)}")
        if self.replications < 1:
            raise ConfigError("replications: must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon: must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        if not self.gamma1_grid:
            raise ConfigError("gamma1_grid: must not be empty")
        for g1 in self.gamma1_grid:
            try:
                validate_schedule(g1, self.gamma)
            except ScheduleError as exc:
                raise ConfigError(f"learning rate (gamma1={g1}, gamma={self.gamma}): {exc}") from exc
        for name in self.models:
            if name not in RATE_MODELS:
                raise ConfigError(f"models: unknown model {name!r}; choose from {RATE_MODELS}")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha: must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("output_path")
        return d


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "str" or kind == "Optional[str]":
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "list":
            if isinstance(value, (str, bytes)) or not hasattr(value, "__iter__"):
                raise TypeError
            if key == "gamma1_grid":
                return [float(v) for v in value]
            return [str(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: invalid value {value!r} (expected {kind})") from None
    return value


def load_config_file(path: str) -> dict:
    """Read a flat JSON object of ExperimentConfig fields."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, "
                          f"column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def build_config(file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Merge experiment defaults, file values and flag overrides (in that order)."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    name = merged.get("experiment")
    if name is None:
        raise ConfigError("experiment: no experiment given")
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    values = dict(DEFAULTS[name])
    for key, value in merged.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown configuration field")
        values[key] = _coerce(key, value)
    return ExperimentConfig(**values).validate()


@dataclass
class ExperimentReport:
    experiment: str
    columns: tuple
    rows: list
    meta: dict


# ---------------------------------------------------------------------------
# experiment bodies


def _rate(cfg: ExperimentConfig, g1: float) -> LearningRate:
    return LearningRate(float(g1), cfg.gamma)


def _quantile_fig(cfg, workers):
    problem = quantile_problem(cfg.alpha, cfg.theta0, cfg.gamma, cfg.K, cfg.a1)
    runs = run_grid(problem, cfg.gamma1_grid, cfg.replications, cfg.horizon, cfg.seed, workers)
    rows = [(o.gamma1, o.method, o.replication, o.final_theta, o.diverged, o.stuck)
            for o in runs]
    return rows, {"theta_star": problem.theta_star}


def _lms_pair(stream, rate, theta0, N, rng):
    a = implicit_sgd(stream, rate, theta0, N, rng)
    b = closed_form_implicit_sgd(stream, rate, theta0, N, rng)
    return np.abs(a.path() - b.path())[1:], a.solver_failures


def _lms_compare(cfg, workers):
    stream = NormalLinearStream(cfg.theta_star, cfg.x_dist, cfg.x, cfg.noise_sd)
    rate = _rate(cfg, cfg.gamma1_grid[0])
    res = replicate(partial(_lms_pair, stream, rate, cfg.theta0, cfg.horizon),
                    cfg.replications, cfg.seed, workers)
    diffs = np.max(np.vstack([d for d, _ in res]), axis=0)
    rows = [(n, float(v)) for n, v in enumerate(diffs.tolist(), start=1)]
    return rows, {"max_abs_diff": float(diffs.max()),
                  "solver_failures": int(sum(f for _, f in res))}


def rate_checkpoints(horizon: int) -> list:
    return sorted({max(1, int(round(horizon * f))) for f in (0.01, 0.03, 0.1, 0.3, 1.0)})


def _rates(cfg, workers):
    cps = rate_checkpoints(cfg.horizon)
    rows = []
    for g1 in cfg.gamma1_grid:
        rate = _rate(cfg, g1)
        for model in cfg.models:
            if model == "logistic-deviance":
                factory, H = logistic_deviance_setup(rate, cfg.horizon, cfg.theta_star, cfg.theta0)
                curve = deviance_curve(H, cfg.theta_star, factory, cfg.replications, cps,
                                       cfg.seed, workers)
            else:
                factory = linear_rate_factory(rate, cfg.horizon, cfg.theta_star, cfg.theta0,
                                              cfg.noise_sd, implicit=model == "normal-linear")
                curve = mse_curve(factory, cfg.theta_star, cfg.replications, cps, cfg.seed,
                                  workers=workers)
            fit = fit_rate_slope(curve, cps[0], cps[-1])
            rows.append((model, cfg.gamma, fit.slope, fit.intercept, fit.r_squared,
                         int(fit.n_range[0]), int(fit.n_range[1])))
    return rows, {"checkpoints": cps}


def _normality(cfg, workers):
    problem = scalar_linear_normality(cfg.x, cfg.noise_sd, cfg.theta_star, cfg.theta0)
    rep = normality_check(problem, _rate(cfg, cfg.gamma1_grid[0]), cfg.horizon,
                          cfg.replications, cfg.seed, workers)
    rows = [(name, rep.relative_errors[name], rep.replications, rep.horizon)
            for name in ("unit", "gamma1_squared")]
    meta = {
        "matching_scaling": rep.matching_scaling,
        "empirical_cov": rep.empirical_cov.tolist(),
        "theoretical_cov": {k: v.tolist() for k, v in rep.theoretical.items()},
    }
    return rows, meta


def _sim_replication(cfg, rng):
    data = expfam_sample(cfg.theta_star, cfg.dataset_size, rng.child(0))
    out = []
    for method in ("explicit", "implicit"):
        for g1 in cfg.gamma1_grid:
            rate = _rate(cfg, g1)
            if method == "explicit":
                tr = sim_explicit(data, rate, cfg.k, cfg.theta0, cfg.horizon, rng)
            else:
                tr = sim_implicit(data, rate, cfg.k, cfg.m, cfg.theta0, cfg.horizon, rng)
            path = tr.path()
            out.append((method, float(g1), rng.stream_id, float(path[-1]),
                        float(np.max(np.abs(path))), tr.diverged))
    return out


def _sim_expfam(cfg, workers):
    per_rep = replicate(partial(_sim_replication, cfg), cfg.replications, cfg.seed, workers)
    rows = sorted((r for rep in per_rep for r in rep),
                  key=lambda r: (r[0] != "explicit", cfg.gamma1_grid.index(r[1]), r[2]))
    return rows, {"dataset_stream": "RngStream(seed, replication).child(0)"}


_RUNNERS = {
    "quantile-fig": _quantile_fig,
    "lms-compare": _lms_compare,
    "rates": _rates,
    "normality": _normality,
    "sim-expfam": _sim_expfam,
}


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> ExperimentReport:
    """Run one study.  Replication r uses RngStream(cfg.seed, r); rows do not
    depend on ``workers``."""
    cfg.validate()
    t0 = time.perf_counter()
    rows, extra = _RUNNERS[cfg.experiment](cfg, max(1, int(workers)))
    meta = {
        "experiment": cfg.experiment,
        "version": __version__,
        "config": cfg.to_dict(),
        "rng": {
            "bit_generator": "PCG64",
            "seed": cfg.seed,
            "stream": "SeedSequence(entropy=seed, spawn_key=(replication,))",
        },
        "runtime_seconds": time.perf_counter() - t0,
        **extra,
    }
    return ExperimentReport(cfg.experiment, COLUMNS[cfg.experiment], rows, meta)


def config_from_meta(meta: dict) -> ExperimentConfig:
    """Rebuild the configuration echoed in a report's meta block."""
    return build_config(meta["config"])
