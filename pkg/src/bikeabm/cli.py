"""Command-line entry point: ``bikeabm <subcommand> ...``.

CSV goes to stdout and diagnostics to stderr.  Exit status is 0 on success,
1 on usage, parse or missing-file errors and 2 when validation finds problems.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

from . import __version__
from .demand import DemandError
from .experiments import (CalibrationResult, ExperimentError, SweepSpec, calibrate, default_jobs,
                          run_sweep, write_surface)
from .indicators import run_indicators
from .ingest import IngestError, parse_files, read_standard_day, reduce_days, write_standard_day
from .network import NetworkError
from .scenario import (DEMAND_FILE, ScenarioError, SyntheticSpec, load_scenario, validate_path,
                       write_synthetic)
from .simcore import ConfigError, simulate

log = logging.getLogger("bikeabm")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2

RUN_COLUMNS = ["run_id", "seed", "r", "p_info", "sigma", "A", "D_tot", "MSE"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_range(text: str) -> list[float]:
    """``a:b:step`` (inclusive of b) or a comma-separated list."""
    try:
        if ":" in text:
            parts = [Decimal(p) for p in text.split(":")]
            if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
                raise UsageError(f"bad range {text!r}; expected a:b:step with step > 0 and b >= a")
            a, b, step = parts
            out, k = [], 0
            while a + k * step <= b:
                out.append(float(a + k * step))
                k += 1
            return out
        return [float(Decimal(p)) for p in text.split(",") if p.strip()]
    except InvalidOperation:
        raise UsageError(f"bad number in {text!r}") from None


def _num(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def cmd_ingest(args) -> int:
    profiles = parse_files(args.files)
    std = reduce_days(profiles, k_inner=args.k_inner, k_day=args.k_day, seed=args.seed)
    write_standard_day(std, args.out)
    print(f"standard day from {len(std.member_dates)} days, {len(std.station_ids)} stations -> {args.out}",
          file=sys.stderr)
    return EXIT_OK


def cmd_fit_demand(args) -> int:
    sc = load_scenario(args.scenario, require_demand=False)
    if args.standard_day:
        std = read_standard_day(args.standard_day)
    elif sc.standard_day is not None:
        std = sc.standard_day
    else:
        raise FileNotFoundError(f"no standard day: {Path(args.scenario) / 'standard_day.csv'}")
    model = sc.fit_demand(args.sigma, std)
    out = args.out or str(Path(args.scenario) / DEMAND_FILE)
    model.save(out)
    print(f"demand sigma={args.sigma:g} bandwidth={model.bandwidth:.1f} m -> {out}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario, require_demand=False)
    cfg = sc.config.replace(seed=args.seed, p_info=args.p_info, walk_radius_m=args.radius,
                            sigma=args.sigma)
    if sc.demand is not None and sc.demand.sigma == cfg.sigma:
        demand = sc.demand
    else:
        demand = sc.fit_demand(cfg.sigma)
    res = simulate(sc.net, demand, cfg, sc.initial_bikes(), cfg.seed,
                   record_events=args.events_out is not None, check=args.check)
    real = sc.real_lf() if args.real is None else read_standard_day(args.real).reindex(sc.net.station_ids)
    _, agg = run_indicators(res, sc.net, real, cfg.tau_s, demand.bin_seconds)
    if args.events_out:
        with open(args.events_out, "w") as fh:
            for ev in res.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
    if args.occupancy_out:
        with open(args.occupancy_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", *sc.net.station_ids])
            for t, row in enumerate(res.occupancy):
                w.writerow([t, *row.tolist()])
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    w.writerow([f"sim_{cfg.seed}", cfg.seed, cfg.walk_radius_m, cfg.p_info, cfg.sigma,
                _num(agg.A), _num(agg.D_tot), _num(agg.MSE)])
    return EXIT_OK


def cmd_calibrate(args) -> int:
    sc = load_scenario(args.scenario, require_demand=False)
    real = read_standard_day(args.real)
    sigmas = parse_range(args.sigma_grid)
    pinfos = parse_range(args.pinfo_grid)
    radii = parse_range(args.radius)
    if any(not 0 <= p <= 1 for p in pinfos):
        raise UsageError("p_info grid values must lie in [0, 1]")
    res: CalibrationResult = calibrate(sc, real, sigmas, pinfos, radii, args.reps,
                                       base_seed=args.seed, jobs=args.jobs)
    if args.out:
        write_surface(res, args.out)
    else:
        tmp = csv.writer(sys.stdout, lineterminator="\n")
        tmp.writerow(["r", "sigma", "p_info", "mse_mean", "mse_std", "mse_ci", "n", "degenerate", "best"])
        for pt in res.surface:
            tmp.writerow([pt.r, pt.sigma, pt.p_info, _num(pt.mse_mean), _num(pt.mse_std), _num(pt.mse_ci),
                          pt.n, int(pt.degenerate), int(res.best[pt.r] is pt)])
    for r, pt in res.best.items():
        print(f"r={r:g}: best sigma={pt.sigma:g} p_info={pt.p_info:g} mse={pt.mse_mean:.6g}", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = SweepSpec.load(args.spec)
    if args.results_dir:
        spec.results_dir = args.results_dir
    out = run_sweep(spec, jobs=args.jobs)
    print(str(out))
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(seed=args.seed, asymmetry=args.asymmetry, grid_size=args.grid_size,
                         n_stations=args.stations)
    out = write_synthetic(args.out, spec)
    print(f"synthetic scenario -> {out}", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    findings = validate_path(args.scenario)
    for f in findings:
        print(f, file=sys.stderr)
    if findings:
        print(f"{len(findings)} finding(s)", file=sys.stderr)
        return EXIT_INVALID
    print("ok", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bikeabm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bikeabm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="reduce station snapshots to a standard day")
    s.add_argument("files", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--k-inner", type=int, default=24)
    s.add_argument("--k-day", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit-demand", help="fit O/D fields and boundary processes")
    s.add_argument("scenario")
    s.add_argument("--sigma", type=float, required=True)
    s.add_argument("--out")
    s.add_argument("--standard-day", help="defaults to the scenario's standard_day.csv")
    s.set_defaults(func=cmd_fit_demand)

    s = sub.add_parser("simulate", help="run one day and print its indicators")
    s.add_argument("scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--p-info", type=float)
    s.add_argument("--radius", type=float)
    s.add_argument("--sigma", type=float)
    s.add_argument("--real", help="standard day for the MSE column")
    s.add_argument("--events-out")
    s.add_argument("--occupancy-out")
    s.add_argument("--check", action="store_true", help="assert conservation every phase")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", help="grid-search sigma and p_info by MSE")
    s.add_argument("scenario")
    s.add_argument("--real", required=True)
    s.add_argument("--sigma-grid", required=True)
    s.add_argument("--pinfo-grid", required=True)
    s.add_argument("--radius", default="400")
    s.add_argument("--reps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=default_jobs())
    s.add_argument("--out")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sweep", help="run a parameter sweep described by a JSON file")
    s.add_argument("spec")
    s.add_argument("--jobs", type=int, default=default_jobs())
    s.add_argument("--results-dir")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gen-synthetic", help="write the synthetic grid district")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--asymmetry", type=float, default=1.0)
    s.add_argument("--grid-size", type=int, default=12)
    s.add_argument("--stations", type=int, default=40)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("validate", help="check a scenario directory")
    s.add_argument("scenario")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        path = exc.filename or ""
        msg = str(exc) if not path or path in str(exc) else f"{exc}: {path}"
        print(f"bikeabm: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, IngestError, DemandError, NetworkError, ConfigError, ScenarioError,
            ExperimentError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"bikeabm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
