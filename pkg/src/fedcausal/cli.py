"""Command-line interface: simulate benchmark scenarios, estimate from CSV
site files, and pretty-print metrics tables.

Exit codes: 0 success, 2 bad arguments or scenario, 3 estimation or
simulation failure, 4 invalid input data.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .density_ratio import BasisSpec
from .errors import FedcausalError, ScenarioError
from .federation import DEFAULT_LAMBDA_GRID
from .fedruntime import ProtocolConfig, audit_ledger, dump_ledger, run_round
from .nuisance import CandidateSpec, FeatureMap
from .simbench import (
    BENCH_METHODS,
    generate_site,
    load_scenario,
    method_config,
    run_scenario,
    thread_count,
)
from .site_estimator import SiteFrame

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
EXIT_DATA = 4


def _parse_lambda_grid(text: str) -> tuple[float, ...]:
    try:
        grid = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lambda grid {text!r}")
    if not grid or any(v < 0 for v in grid):
        raise argparse.ArgumentTypeError("lambda grid must be nonnegative and non-empty")
    return grid


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcausal",
        description="Federated estimation of target-population treatment effects.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo benchmark scenario")
    sim.add_argument("--scenario", required=True, help="preset name or scenario JSON path")
    sim.add_argument(
        "--methods", default=",".join(BENCH_METHODS),
        help="comma-separated subset of: " + ",".join(BENCH_METHODS),
    )
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--alpha", type=float, default=0.05)
    sim.add_argument("--lambda-grid", type=_parse_lambda_grid,
                     default=DEFAULT_LAMBDA_GRID)
    sim.add_argument("--out", required=True, help="output directory")

    est = sub.add_parser("estimate", help="estimate from per-site CSV files")
    est.add_argument("--target", required=True, help="target site CSV (y,a,x1..xp)")
    est.add_argument("--source", action="append", default=[],
                     help="source site CSV; repeatable")
    est.add_argument("--method", default="mr_l1",
                     choices=("target", "ss", "ivw", "aipw_l1", "mr_l1"))
    est.add_argument("--alpha", type=float, default=0.05)
    est.add_argument("--lambda-grid", type=_parse_lambda_grid,
                     default=DEFAULT_LAMBDA_GRID)
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--out", default=None, help="directory for report.json and ledger.jsonl")

    rep = sub.add_parser("report", help="print a metrics.csv as an aligned table")
    rep.add_argument("--metrics", required=True, help="metrics.csv from a simulate run")
    return parser


def _cmd_simulate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    unknown = [m for m in methods if m not in BENCH_METHODS]
    if not methods or unknown:
        print(f"error: unknown methods {unknown}", file=sys.stderr)
        return EXIT_USAGE
    if args.reps < 1 or not 0.0 < args.alpha < 1.0:
        print("error: reps must be >= 1 and alpha in (0, 1)", file=sys.stderr)
        return EXIT_USAGE

    try:
        result = run_scenario(
            scenario, methods=methods, reps=args.reps, seed=args.seed,
            alpha=args.alpha, lambda_grid=args.lambda_grid,
        )
    except (ScenarioError, FedcausalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    os.makedirs(args.out, exist_ok=True)
    result.write_metrics_csv(os.path.join(args.out, "metrics.csv"))
    result.write_replications_csv(os.path.join(args.out, "replications.csv"))

    # Protocol transcript of one replication, for inspection and audit.
    frames = [
        generate_site(site, scenario, np.random.Generator(
            np.random.Philox(np.random.SeedSequence((args.seed, 0, idx)))))
        for idx, site in enumerate(scenario.sites)
    ]
    config = method_config(methods[0], scenario, alpha=args.alpha,
                           lambda_grid=args.lambda_grid, seed=args.seed)
    report = run_round(frames, config)
    dump_ledger(report.privacy_ledger, os.path.join(args.out, "ledger.jsonl"))

    manifest = {
        "scenario": scenario.name,
        "methods": list(methods),
        "reps": args.reps,
        "seed": args.seed,
        "alpha": args.alpha,
        "lambda_grid": list(args.lambda_grid),
        "threads": thread_count(),
        "failures": result.failures,
        "version": __version__,
        "ledger_audit": audit_ledger(report),
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    print(f"wrote metrics for {len(methods)} methods x {args.reps} reps to {args.out}")
    return EXIT_OK


def _read_site_csv(path: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    """Read a site CSV with header y,a,x1..xp; returns (y, a, X, x names)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file")
        rows = list(reader)
    if len(header) < 3 or header[0] != "y" or header[1] != "a":
        raise ValueError(f"{path}: header must start with y,a followed by covariates")
    if not rows:
        raise ValueError(f"{path}: no data rows")
    try:
        data = np.array(rows, dtype=float)
    except ValueError:
        raise ValueError(f"{path}: non-numeric cell")
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite values")
    y, a, X = data[:, 0], data[:, 1], data[:, 2:]
    if not np.all(np.isin(a, (0.0, 1.0))):
        raise ValueError(f"{path}: treatment column must be binary 0/1")
    return y, a.astype(int), X, header[2:]


def _cmd_estimate(args) -> int:
    try:
        y, a, X, tgt_names = _read_site_csv(args.target)
        frames = [SiteFrame(
            site_id=os.path.splitext(os.path.basename(args.target))[0],
            role="target", y=y, a=a, X=X,
            shared_cols=tuple(range(X.shape[1])),
        )]
        for path in args.source:
            ys, as_, Xs, names = _read_site_csv(path)
            missing = [c for c in tgt_names if c not in names]
            if missing:
                raise ValueError(f"{path}: missing shared covariates {missing}")
            shared = tuple(names.index(c) for c in tgt_names)
            frames.append(SiteFrame(
                site_id=os.path.splitext(os.path.basename(path))[0],
                role="source", y=ys, a=as_, X=Xs, shared_cols=shared,
            ))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    raw = FeatureMap("raw")
    candidates = {"default": {
        "treatment": [CandidateSpec("x", "treatment", raw)],
        "outcome": [CandidateSpec("x", "outcome", raw)],
    }}
    runtime_method = {"target": "target_only"}.get(args.method, args.method)
    config = ProtocolConfig(
        basis=BasisSpec("linear"),
        candidates=candidates,
        method=runtime_method,
        alpha=args.alpha,
        lambda_grid=args.lambda_grid,
        seed=args.seed,
    )
    try:
        report = run_round(frames, config)
    except FedcausalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    print(report.to_json())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        dump_ledger(report.privacy_ledger, os.path.join(args.out, "ledger.jsonl"))
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        with open(args.metrics, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if not rows or rows[0][:2] != ["method", "reps"]:
        print(f"error: {args.metrics} is not a metrics table", file=sys.stderr)
        return EXIT_DATA
    header, body = rows[0], rows[1:]

    def fmt(cell: str) -> str:
        try:
            v = float(cell)
        except ValueError:
            return cell
        return cell if v == int(v) and "." not in cell else f"{v:.3f}"

    table = [header] + [[fmt(c) for c in r] for r in body]
    widths = [max(len(r[j]) for r in table) for j in range(len(header))]
    for r in table:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return _cmd_simulate(args)
    if args.command == "estimate":
        return _cmd_estimate(args)
    return _cmd_report(args)


if __name__ == "__main__":
    sys.exit(main())
