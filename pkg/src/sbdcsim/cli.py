"""Command-line entry point: ``sbdcsim {validate,run,compare,sweep}``.

Exit codes: 0 success, 2 configuration error (unreadable or invalid
scenario, unknown sweep key, bad arguments), 3 run aborted on an invariant
violation. Log verbosity follows ``SBDCSIM_LOG`` (default WARNING); logs go
to stderr so CSV/JSON on stdout stays clean.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .contact_graph import ConfigurationError, parse_contacts
from .engine import InvariantViolation, aggregate, build_world, compare_modes, run, sweep
from .scenario import Scenario, ScenarioError, coerce_value, load_scenario, resolve_key

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
LOG_ENV = "SBDCSIM_LOG"

log = logging.getLogger("sbdcsim")

SWEEP_METRICS = (
    "tasks_generated", "tasks_completed", "tasks_missed", "tasks_in_flight", "completion_rate", "feeder_bits",
    "latency_mean_s", "latency_p95_s", "deadline_miss_rate", "energy_per_completed_task_Wh", "migrations",
    "red_zone_violations", "energy_residual_max_fraction", "isl_availability",
)


class ConfigError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load(path: str) -> Scenario:
    try:
        return load_scenario(path)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _contacts(path: str | None, scn: Scenario):
    if path is None:
        return None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
    ids = build_world(scn.model).ids
    try:
        plan = parse_contacts(text, ids)
    except ConfigurationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    bad = [c for c in plan if c.src >= len(ids) or c.dst >= len(ids) or c.src < 0 or c.dst < 0]
    if bad:
        raise ConfigError(f"{path}: contact references unknown node id {bad[0].src}->{bad[0].dst}")
    return plan


def cmd_validate(args) -> int:
    try:
        scn = _load(args.scenario)
    except ScenarioError as exc:
        for issue in exc.issues:
            print(f"{args.scenario}: {issue}")
        return EXIT_CONFIG
    try:
        build_world(scn.model)
    except (ValueError, ConfigurationError) as exc:
        print(f"{args.scenario}: {exc}")
        return EXIT_CONFIG
    print(f"{args.scenario}: ok (sha256 {scn.source_hash})")
    return EXIT_OK


def cmd_run(args) -> int:
    scn = _load(args.scenario)
    if args.seed is not None:
        scn = scn.with_seed(args.seed)
    contacts = _contacts(args.contacts_file, scn)
    watchdog = False if args.no_watchdog else None
    try:
        ledger = run(scn, contacts, watchdog)
    except InvariantViolation as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    paths = ledger.write(args.out_dir)
    for p in paths:
        print(p)
    return EXIT_OK


def _write_compare_csv(report: dict, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mode", "value"])
        for mode, metrics in report["modes"].items():
            for key, value in metrics.items():
                if isinstance(value, dict):
                    for sub, v in value.items():
                        w.writerow([f"{key}.{sub}", mode, "" if v is None else v])
                else:
                    w.writerow([key, mode, "" if value is None else value])


def cmd_compare(args) -> int:
    scn = _load(args.scenario)
    if args.seed is not None:
        scn = scn.with_seed(args.seed)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    valid = {"relay_only", "in_orbit_compute"}
    if not modes or any(m not in valid for m in modes) or len(set(modes)) != len(modes):
        raise ConfigError(f"--modes must list distinct values from {sorted(valid)}")
    contacts = _contacts(args.contacts_file, scn)
    try:
        report = compare_modes(scn, modes, contacts)
    except InvariantViolation as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    ledgers = report.pop("_ledgers")
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(text)
        _write_compare_csv(report, out / "compare.csv")
        for mode, led in ledgers.items():
            led.write(out / mode)
    sys.stdout.write(text)
    return EXIT_OK


def _parse_params(specs: Sequence[str], scn: Scenario) -> dict[str, list]:
    grid: dict[str, list] = {}
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = key.strip()
        if not sep or not key or not values:
            raise ConfigError(f"--param expects key=v1,v2,... got {spec!r}")
        if not resolve_key(scn.materialized, key):
            raise ConfigError(f"unknown parameter {key!r}")
        grid[key] = [coerce_value(v.strip()) for v in values.split(",")]
    if not grid:
        raise ConfigError("at least one --param is required")
    return grid


def cmd_sweep(args) -> int:
    scn = _load(args.scenario)
    grid = _parse_params(args.param, scn)
    if args.seeds < 1 or args.workers < 1:
        raise ConfigError("--seeds and --workers must be >= 1")
    base = scn.model.seed if args.seed is None else args.seed
    seeds = list(range(base, base + args.seeds))
    results = sweep(scn, grid, seeds, workers=args.workers, keep_ledgers=bool(args.out_dir))
    agg = aggregate(results)
    keys = list(grid)
    rows = []
    for r in results:
        summary = agg[(r.label, r.seed)]
        row = [r.label, *(v for _, v in r.point), r.seed, "error" if r.error else "ok", r.error or ""]
        row += ["" if r.error or summary.get(m) is None else summary[m] for m in SWEEP_METRICS]
        rows.append(row)
    header = ["point", *keys, "seed", "status", "error", *SWEEP_METRICS]
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "aggregate.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        n_points = len(results) // len(seeds)
        for i, r in enumerate(results):
            if r.ledger is not None:
                r.ledger.write(out / f"point{i // len(seeds):0{len(str(n_points))}d}" / f"seed{r.seed}")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    for r in results:
        if r.error:
            log.warning("point %s seed %d failed: %s", r.label, r.seed, r.error)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbdcsim", description="Multi-orbit space data-center simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario file against the schema")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="simulate one scenario and write the ledger")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--out-dir", default="out")
    r.add_argument("--contacts-file", help="contact plan text file replacing the geometric plan")
    r.add_argument("--no-watchdog", action="store_true", help="disable the degradation watchdog")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="relay_only vs in_orbit_compute on identical geometry")
    c.add_argument("scenario")
    c.add_argument("--modes", default="relay_only,in_orbit_compute")
    c.add_argument("--seed", type=int)
    c.add_argument("--out-dir")
    c.add_argument("--contacts-file")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="Cartesian parameter grid x seeds")
    s.add_argument("scenario")
    s.add_argument("--param", action="append", default=[], metavar="KEY=V1,V2,...")
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds per point")
    s.add_argument("--seed", type=int, help="first seed (default: the scenario's)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except ScenarioError as exc:
        for issue in exc.issues:
            print(f"{args.scenario}: {issue}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
