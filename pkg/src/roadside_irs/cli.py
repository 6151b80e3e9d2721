"""Command-line experiment runner.

    roadside-irs run FILE [--seed N] [--runs N] [--out PATH] [--trace] [--workers N]
    roadside-irs validate FILE
    roadside-irs defaults

``ROADSIDE_IRS_SEED`` and ``ROADSIDE_IRS_WORKERS`` override the seed and
worker count when the matching flag is not given.
"""

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

from .config import ExperimentSpec, parse_experiment
from .errors import ConfigError
from .sim import monte_carlo

COLUMNS = ("sweep_param", "sweep_value", "scheme", "mean_rate_bps_hz", "std_rate", "mean_gamma_db", "angle_rmse", "runs")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _env_int(name):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer, got {raw!r}") from None


def _db(x):
    return 10.0 * math.log10(x) if x > 0 else float("-inf")


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else str(x)


def result_rows(spec, value, stats):
    rows = []
    for scheme in spec.schemes:
        s = stats[scheme]
        rows.append(
            {
                "sweep_param": spec.sweep_param or "none",
                "sweep_value": value,
                "scheme": scheme,
                "mean_rate_bps_hz": s.mean_rate,
                "std_rate": s.std_rate,
                "mean_gamma_db": _db(s.mean_gamma),
                "angle_rmse": s.angle_rmse,
                "runs": s.runs,
            }
        )
    return rows


def failure_rows(spec, value):
    nan = float("nan")
    return [
        {
            "sweep_param": spec.sweep_param or "none",
            "sweep_value": value,
            "scheme": scheme,
            "mean_rate_bps_hz": nan,
            "std_rate": nan,
            "mean_gamma_db": nan,
            "angle_rmse": nan,
            "runs": 0,
        }
        for scheme in spec.schemes
    ]


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def write_outputs(out, spec, rows, failures, traces):
    out = Path(out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in COLUMNS])
    sidecar = {
        "spec": spec.to_dict(),
        "columns": list(COLUMNS),
        "rows": [{k: _json_safe(v) for k, v in row.items()} for row in rows],
        "failures": failures,
    }
    if traces is not None:
        sidecar["traces"] = traces
    with open(out.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")


def run_experiment(spec, workers=1, trace=False, out=None, log=None):
    """Run every sweep point and write the CSV table and JSON sidecar.

    Returns the exit status. A failing sweep point keeps its rows with
    ``runs = 0`` and NaN metrics and the run continues with the next one.
    """
    log = log or (lambda msg: None)
    rows, failures = [], []
    traces = {} if trace else None
    for value, cfg in spec.points():
        label = "base" if value is None else f"{spec.sweep_param}={value}"
        log(f"{label}: {spec.n_runs} run(s)")
        try:
            stats = monte_carlo(cfg, spec.n_runs, spec.schemes, workers)
        except Exception as exc:  # keep partial results
            failures.append({"sweep_value": value, "error": f"{type(exc).__name__}: {exc}"})
            rows.extend(failure_rows(spec, value))
            continue
        rows.extend(result_rows(spec, value, stats))
        if trace:
            traces[label] = {
                s: {
                    "rate_per_block": [float(v) for v in stats[s].rate_per_block],
                    "gamma_per_block": [float(v) for v in stats[s].gamma_per_block],
                    "run_mean_rates": [float(v) for v in stats[s].run_rates],
                    "degraded_runs": stats[s].degraded_runs,
                }
                for s in spec.schemes
            }
    write_outputs(out or spec.output, spec, rows, failures, traces)
    return EXIT_RUNTIME if failures else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="roadside-irs", description="Roadside IRS vehicular link simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment file")
    run.add_argument("spec", help="experiment YAML file")
    run.add_argument("--seed", type=int, help="master seed (overrides the file)")
    run.add_argument("--runs", type=int, help="Monte Carlo runs per sweep point")
    run.add_argument("--out", help="CSV output path; the JSON sidecar goes next to it")
    run.add_argument("--trace", action="store_true", help="add per-block traces to the JSON sidecar")
    run.add_argument("--workers", type=int, help="worker processes")
    val = sub.add_parser("validate", help="check an experiment file and print it fully resolved")
    val.add_argument("spec")
    sub.add_parser("defaults", help="print the default experiment as YAML")
    return parser


def _resolve(spec, args):
    seed = args.seed if args.seed is not None else _env_int("ROADSIDE_IRS_SEED")
    if seed is not None:
        spec = dataclasses.replace(spec, base=spec.base.replace(seed=seed))
    if args.runs is not None:
        if args.runs < 1:
            raise ConfigError("--runs must be >= 1")
        spec = dataclasses.replace(spec, n_runs=args.runs)
    workers = args.workers if args.workers is not None else _env_int("ROADSIDE_IRS_WORKERS")
    workers = 1 if workers is None else workers
    if workers < 1:
        raise ConfigError("worker count must be >= 1")
    return spec, workers


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "defaults":
            sys.stdout.write(ExperimentSpec().to_yaml())
            return EXIT_OK
        spec = parse_experiment(args.spec)
        if args.command == "validate":
            sys.stdout.write(spec.to_yaml())
            return EXIT_OK
        spec, workers = _resolve(spec, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run_experiment(spec, workers, args.trace, args.out, log=lambda m: print(m, file=sys.stderr))
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
