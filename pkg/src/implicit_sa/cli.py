"""Command-line front end::

    sa run --experiment quantile-fig --out fig1.csv
    sa run --experiment normality --replications 500 --format json --out norm.json
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from typing import Optional, Sequence

from .experiments import (
    EXPERIMENTS,
    ConfigError,
    ExperimentReport,
    build_config,
    load_config_file,
    run_experiment,
)


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def render_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(report.columns)
    for row in report.rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def render_json(report: ExperimentReport) -> str:
    doc = {
        "meta": report.meta,
        "columns": list(report.columns),
        "rows": [dict(zip(report.columns, row)) for row in report.rows],
    }
    return json.dumps(doc, indent=2) + "\n"


def emit_report(report: ExperimentReport, path: Optional[str], fmt: str = "csv") -> str:
    """Write the report to ``path`` (stdout when None) and return the text."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    text = render_csv(report) if fmt == "csv" else render_json(report)
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _grid(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a replication study and write its rows")
    run.add_argument("--experiment", choices=EXPERIMENTS)
    run.add_argument("--config", help="JSON file with ExperimentConfig fields")
    run.add_argument("--seed", type=int)
    run.add_argument("--replications", type=int)
    grid = run.add_mutually_exclusive_group()
    grid.add_argument("--gamma1", type=float, help="single learning-rate constant")
    grid.add_argument("--gamma1-grid", type=_grid, help="comma-separated constants")
    run.add_argument("--gamma", type=float, help="learning-rate decay exponent")
    run.add_argument("--horizon", type=int)
    run.add_argument("--workers", type=int,
                     help="worker processes (default: $SA_WORKERS or 1)")
    run.add_argument("--out", help="output file (default: stdout)")
    run.add_argument("--format", choices=("csv", "json"))
    return parser


def parse_config(argv: Optional[Sequence[str]] = None):
    """Parse ``sa run`` flags into ``(ExperimentConfig, workers, format)``.

    Flag values override values from ``--config``.
    """
    args = build_parser().parse_args(argv)
    file_values = load_config_file(args.config) if args.config else {}
    grid = [args.gamma1] if args.gamma1 is not None else args.gamma1_grid
    overrides = {
        "experiment": args.experiment,
        "seed": args.seed,
        "replications": args.replications,
        "gamma1_grid": grid,
        "gamma": args.gamma,
        "horizon": args.horizon,
        "output_path": args.out,
    }
    cfg = build_config(file_values, overrides)
    workers = args.workers
    if workers is None:
        env = os.environ.get("SA_WORKERS", "1")
        try:
            workers = int(env)
        except ValueError:
            raise ConfigError(f"SA_WORKERS: not an integer: {env!r}") from None
    fmt = args.format
    if fmt is None:
        fmt = "json" if (cfg.output_path or "").endswith(".json") else "csv"
    return cfg, max(1, workers), fmt


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg, workers, fmt = parse_config(argv)
    except ConfigError as exc:
        print(f"sa: configuration error: {exc}", file=sys.stderr)
        return 2
    report = run_experiment(cfg, workers)
    try:
        emit_report(report, cfg.output_path, fmt)
    except OSError as exc:
        print(f"sa: cannot write report: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
