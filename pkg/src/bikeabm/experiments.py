"""Monte-Carlo replications, calibration surfaces and parameter sweeps.

Replication ``i`` of a point always runs with ``derive_seed(base_seed, i)``,
so adding replications never changes earlier ones, and results are reduced in
replication order whatever the number of worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import __version__
from .demand import DemandModel, bandwidth_for
from .indicators import (adverse_rate, detour_ratio, heterogeneity, load_factors, mean_load, mse,
                         resample_to_bins)
from .ingest import StandardDay, read_standard_day
from .scenario import Scenario, load_scenario
from .simcore import simulate

log = logging.getLogger(__name__)

Z95 = Fraction(196, 100)
INDICATORS = ("A", "D_tot", "MSE")


class ExperimentError(ValueError):
    pass


class AllDegenerate(ExperimentError):
    pass


def derive_seed(base_seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"{base_seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def required_replications(target_ci_len_in_sigmas: float = 0.5) -> int:
    """Replications for a 95% CI on the mean of length `target` standard deviations.

    The interval has length 2 * 1.96 * std / sqrt(n).
    """
    if not target_ci_len_in_sigmas > 0:
        raise ExperimentError("target must be positive")
    target = Fraction(target_ci_len_in_sigmas).limit_denominator(10**9)
    n = (2 * Z95 / target) ** 2
    return math.ceil(n)


@dataclass(frozen=True)
class Params:
    r: float
    p_info: float
    sigma: float

    def label(self) -> str:
        return f"r{self.r:g}_p{self.p_info:g}_s{self.sigma:g}"


@dataclass
class RunRow:
    run_id: str
    rep: int
    seed: int
    params: Params
    A: float
    D_tot: float
    MSE: float | None
    mean_load: np.ndarray | None = None
    heterogeneity: np.ndarray | None = None
    bin_occupancy: np.ndarray | None = None


@dataclass
class PointSummary:
    params: Params
    n: int
    mean: dict[str, float]
    std: dict[str, float]
    ci: dict[str, float]
    skew: dict[str, float]
    runs: list[RunRow] = field(default_factory=list, repr=False)


def summarize(params: Params, runs: Sequence[RunRow]) -> PointSummary:
    n = len(runs)
    mean, std, ci, skew = {}, {}, {}, {}
    for name in INDICATORS:
        vals = np.array([getattr(r, name) for r in runs], dtype=float)
        if vals.size == 0 or np.isnan(vals).all():
            mean[name] = std[name] = ci[name] = skew[name] = float("nan")
            continue
        vals = vals[~np.isnan(vals)]
        m = len(vals)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std(ddof=1)) if m > 1 else 0.0
        ci[name] = float(1.96 * std[name] / math.sqrt(m))
        skew[name] = float(stats.skew(vals)) if m > 2 and std[name] > 0 else 0.0
    return PointSummary(params, n, mean, std, ci, skew, list(runs))


# ----------------------------------------------------------------------
# single replication


class DemandCache:
    """Demand models per kernel size, fitted lazily from the scenario's standard day."""

    def __init__(self, scenario: Scenario, source: StandardDay | None = None):
        self.scenario = scenario
        self.source = source
        self._models: dict[float, DemandModel] = {}
        if scenario.demand is not None and source is None:
            self._models[float(scenario.demand.sigma)] = scenario.demand

    def get(self, sigma: float) -> DemandModel:
        key = float(sigma)
        model = self._models.get(key)
        if model is None:
            if self.source is None and self.scenario.standard_day is None:
                raise ExperimentError(
                    f"no standard day to fit sigma={sigma}; scenario demand has sigma="
                    f"{self.scenario.demand.sigma if self.scenario.demand else None}")
            model = self.scenario.fit_demand(sigma, self.source)
            self._models[key] = model
        return model


def run_replication(scenario: Scenario, demands: DemandCache, params: Params, rep: int, seed: int,
                    real_lf: np.ndarray | None = None, *, keep_series: bool = False,
                    keep_occupancy: bool = False, series: bool = True) -> RunRow:
    demand = demands.get(params.sigma)
    cfg = scenario.config.replace(p_info=params.p_info, walk_radius_m=params.r, sigma=params.sigma)
    res = simulate(scenario.net, demand, cfg, scenario.initial_bikes(), seed)
    caps = scenario.net.capacities
    err = None
    bin_occ = None
    if real_lf is not None:
        bin_occ = resample_to_bins(res.occupancy, cfg.tau_s, demand.bin_seconds, real_lf.shape[1])
        err = mse(load_factors(bin_occ, caps), real_lf.T)
    row = RunRow(f"{params.label()}_{rep}", rep, seed, params,
                 adverse_rate(res.records) if res.records else 0.0,
                 detour_ratio(res.records), err)
    if keep_series and series:
        row.mean_load = mean_load(res.occupancy, caps)
        row.heterogeneity = heterogeneity(res.occupancy, caps, scenario.net.station_distances)
    if keep_occupancy:
        row.bin_occupancy = bin_occ
    return row


# worker-process state, installed once per process by _init_worker
_WORKER: dict = {}


def _init_worker(scenario: Scenario, source: StandardDay | None, real_lf, opts: dict) -> None:
    _WORKER.clear()
    _WORKER.update(scenario=scenario, demands=DemandCache(scenario, source), real_lf=real_lf, opts=opts)


def _worker_task(task: tuple[Params, int, int]) -> RunRow:
    params, rep, seed = task
    w = _WORKER
    return run_replication(w["scenario"], w["demands"], params, rep, seed, w["real_lf"], **w["opts"])


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def run_tasks(scenario: Scenario, tasks: list[tuple[Params, int, int]], *, jobs: int = 1,
              source: StandardDay | None = None, real_lf=None, **opts) -> list[RunRow]:
    """Run replication tasks; results come back in task order."""
    if jobs <= 1 or len(tasks) <= 1:
        _init_worker(scenario, source, real_lf, opts)
        try:
            return [_worker_task(t) for t in tasks]
        finally:
            _WORKER.clear()
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(scenario, source, real_lf, opts)) as pool:
        return list(pool.map(_worker_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def run_point(params: Params, scenario: Scenario, n: int, base_seed: int, *, jobs: int = 1,
              real_lf: np.ndarray | None = None, **opts) -> PointSummary:
    if n < 1:
        raise ExperimentError("need at least one replication")
    tasks = [(params, i, derive_seed(base_seed, i)) for i in range(n)]
    return summarize(params, run_tasks(scenario, tasks, jobs=jobs, real_lf=real_lf, **opts))


def run_points(points: Sequence[Params], scenario: Scenario, n: int, base_seed: int, *,
               jobs: int = 1, **kw) -> list[PointSummary]:
    tasks = [(p, i, derive_seed(base_seed, i)) for p in points for i in range(n)]
    rows = run_tasks(scenario, tasks, jobs=jobs, **kw)
    return [summarize(p, rows[k * n:(k + 1) * n]) for k, p in enumerate(points)]


# ----------------------------------------------------------------------
# calibration


@dataclass
class SurfacePoint:
    r: float
    sigma: float
    p_info: float
    mse_mean: float
    mse_std: float
    mse_ci: float
    n: int
    degenerate: bool
    runs: list[RunRow] = field(default_factory=list, repr=False)


@dataclass
class CalibrationResult:
    surface: list[SurfacePoint]
    best: dict[float, SurfacePoint]


def is_degenerate(sigma: float, diameter: float) -> bool:
    """Kernels wider than the district give near-uniform fields."""
    return bandwidth_for(sigma, diameter) > diameter


def pick_best(points: Sequence[SurfacePoint]) -> SurfacePoint:
    usable = [p for p in points if not p.degenerate and not math.isnan(p.mse_mean)]
    if not usable:
        raise AllDegenerate("every grid point lies in the degenerate large-kernel region")
    return min(usable, key=lambda p: (p.mse_mean, p.sigma, p.p_info))


def calibrate(scenario: Scenario, real: StandardDay, sigma_grid: Sequence[float],
              p_info_grid: Sequence[float], r_list: Sequence[float], n: int, *, base_seed: int = 0,
              jobs: int = 1, demand_source: StandardDay | None = None,
              keep_occupancy: bool = False) -> CalibrationResult:
    """Grid search of mean MSE over (sigma, p_info) for each walking radius.

    Demand is fitted from `demand_source`, else the scenario's standard day,
    else `real` itself.
    """
    if not (sigma_grid and p_info_grid and r_list):
        raise ExperimentError("calibration grids must be non-empty")
    source = demand_source or scenario.standard_day or real
    real_lf = real.reindex(scenario.net.station_ids)
    diameter = scenario.net.diameter
    grid = [Params(float(r), float(p), float(s)) for r in r_list for s in sigma_grid for p in p_info_grid]
    summaries = run_points(grid, scenario, n, base_seed, jobs=jobs, source=source, real_lf=real_lf,
                           keep_occupancy=keep_occupancy, series=False)
    surface = []
    for s in summaries:
        p = s.params
        surface.append(SurfacePoint(p.r, p.sigma, p.p_info, s.mean["MSE"], s.std["MSE"], s.ci["MSE"],
                                    s.n, is_degenerate(p.sigma, diameter), s.runs))
    best = {}
    for r in r_list:
        best[float(r)] = pick_best([pt for pt in surface if pt.r == float(r)])
    return CalibrationResult(surface, best)


def simulated_standard_day(scenario: Scenario, sigma: float, p_info: float, n: int, *,
                           base_seed: int = 0, r: float | None = None, jobs: int = 1) -> StandardDay:
    """Mean 5-minute load factors of `n` runs at known parameters.

    Calibrating against this target should recover (sigma, p_info).
    """
    params = Params(float(scenario.config.walk_radius_m if r is None else r), float(p_info), float(sigma))
    tasks = [(params, i, derive_seed(base_seed, i)) for i in range(n)]
    ref = scenario.real_lf()
    if ref is None:
        raise ExperimentError("scenario needs a standard day to define the bin grid")
    rows = run_tasks(scenario, tasks, jobs=jobs, real_lf=ref, keep_occupancy=True, series=False)
    occ = np.mean([row.bin_occupancy for row in rows], axis=0)
    lf = load_factors(occ, scenario.net.capacities).T
    return StandardDay(list(scenario.net.station_ids), lf, [], 0)


def write_surface(result: CalibrationResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "sigma", "p_info", "mse_mean", "mse_std", "mse_ci", "n", "degenerate", "best"])
        for pt in result.surface:
            best = result.best.get(pt.r) is pt
            w.writerow([pt.r, pt.sigma, pt.p_info, repr(pt.mse_mean), repr(pt.mse_std), repr(pt.mse_ci),
                        pt.n, int(pt.degenerate), int(best)])


# ----------------------------------------------------------------------
# sweeps


@dataclass
class SweepSpec:
    name: str
    scenario: str
    r: list[float]
    p_info: list[float]
    sigma: list[float]
    replications: int = 60
    base_seed: int = 0
    real: str | None = None
    results_dir: str = "results"
    keep_series: bool = True

    def __post_init__(self):
        if not (self.r and self.p_info and self.sigma):
            raise ExperimentError("sweep axes must be non-empty")
        if self.replications < 1:
            raise ExperimentError("replications must be at least 1")

    @classmethod
    def load(cls, path: str | Path) -> "SweepSpec":
        path = Path(path)
        with open(path) as fh:
            doc = json.load(fh)
        axes = doc.get("axes", {})
        base = path.parent

        def rel(p):
            return None if p is None else str((base / p).resolve()) if not os.path.isabs(p) else p

        return cls(
            name=str(doc.get("name", path.stem)),
            scenario=rel(doc["scenario"]),
            r=[float(x) for x in axes.get("r", [])],
            p_info=[float(x) for x in axes.get("p_info", [])],
            sigma=[float(x) for x in axes.get("sigma", [])],
            replications=int(doc.get("replications", 60)),
            base_seed=int(doc.get("base_seed", 0)),
            real=rel(doc.get("real")),
            results_dir=str(doc.get("results_dir", "results")),
            keep_series=bool(doc.get("keep_series", True)),
        )

    def points(self) -> list[Params]:
        return [Params(r, p, s) for r in self.r for p in self.p_info for s in self.sigma]


def threshold(xs: Sequence[float], ys: Sequence[float], share: float = 0.8) -> float | None:
    """Smallest x whose decrease from the first value reaches `share` of the largest decrease."""
    order = np.argsort(xs, kind="stable")
    x = np.asarray(xs, dtype=float)[order]
    y = np.asarray(ys, dtype=float)[order]
    drop = y[0] - y
    total = drop.max()
    if not total > 0:
        return None
    hit = np.flatnonzero(drop >= share * total - 1e-15)
    return float(x[hit[0]])


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) < 2 or np.ptp(xs) == 0 or np.ptp(ys) == 0:
        return float("nan")
    return float(stats.spearmanr(xs, ys).statistic)


def trend_rows(summaries: Sequence[PointSummary]) -> list[dict]:
    """Monotonicity and threshold report along the p_info and r axes."""
    rows = []
    groups: dict[tuple, list[PointSummary]] = {}
    for s in summaries:
        groups.setdefault((s.params.r, s.params.sigma), []).append(s)
    for (r, sigma), pts in sorted(groups.items()):
        if len(pts) < 2:
            continue
        xs = [p.params.p_info for p in pts]
        a = [p.mean["A"] for p in pts]
        d = [p.mean["D_tot"] for p in pts]
        rows.append({"axis": "p_info", "r": r, "p_info": "", "sigma": sigma,
                     "spearman_A": spearman(xs, a), "spearman_D_tot": spearman(xs, d),
                     "threshold80_A": threshold(xs, a), "threshold80_D_tot": threshold(xs, d)})
    groups = {}
    for s in summaries:
        groups.setdefault((s.params.p_info, s.params.sigma), []).append(s)
    for (p, sigma), pts in sorted(groups.items()):
        if len(pts) < 2:
            continue
        xs = [q.params.r for q in pts]
        a = [q.mean["A"] for q in pts]
        d = [q.mean["D_tot"] for q in pts]
        rows.append({"axis": "r", "r": "", "p_info": p, "sigma": sigma,
                     "spearman_A": spearman(xs, a), "spearman_D_tot": spearman(xs, d),
                     "threshold80_A": threshold(xs, a), "threshold80_D_tot": threshold(xs, d)})
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_sweep(spec: SweepSpec, *, jobs: int = 1) -> Path:
    scenario = load_scenario(spec.scenario, require_demand=False)
    real = read_standard_day(spec.real) if spec.real else scenario.standard_day
    real_lf = real.reindex(scenario.net.station_ids) if real is not None else None
    pts = spec.points()
    summaries = run_points(pts, scenario, spec.replications, spec.base_seed, jobs=jobs,
                           real_lf=real_lf, keep_series=spec.keep_series)
    out = Path(spec.results_dir) / spec.name
    out.mkdir(parents=True, exist_ok=True)
    cols = ["r", "p_info", "sigma", "n"]
    for name in INDICATORS:
        cols += [f"{name}_mean", f"{name}_std", f"{name}_ci95", f"{name}_skew"]
    with open(out / "points.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for s in summaries:
            row = [s.params.r, s.params.p_info, s.params.sigma, s.n]
            for name in INDICATORS:
                row += [_fmt(s.mean[name]), _fmt(s.std[name]), _fmt(s.ci[name]), _fmt(s.skew[name])]
            w.writerow(row)
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "seed", "r", "p_info", "sigma", "A", "D_tot", "MSE"])
        for s in summaries:
            for run in s.runs:
                p = run.params
                w.writerow([run.run_id, run.seed, p.r, p.p_info, p.sigma, _fmt(run.A), _fmt(run.D_tot),
                            _fmt(run.MSE)])
    diameter = scenario.net.diameter
    with open(out / "surface.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "sigma", "p_info", "mse_mean", "mse_std", "mse_ci", "n", "degenerate"])
        for s in summaries:
            p = s.params
            w.writerow([p.r, p.sigma, p.p_info, _fmt(s.mean["MSE"]), _fmt(s.std["MSE"]), _fmt(s.ci["MSE"]),
                        s.n, int(is_degenerate(p.sigma, diameter))])
    trends = trend_rows(summaries)
    with open(out / "trends.csv", "w", newline="") as fh:
        keys = ["axis", "r", "p_info", "sigma", "spearman_A", "spearman_D_tot",
                "threshold80_A", "threshold80_D_tot"]
        w = csv.writer(fh)
        w.writerow(keys)
        for row in trends:
            w.writerow([_fmt(row[k]) for k in keys])
    if spec.keep_series:
        with open(out / "series_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "p_info", "sigma", "tick", "mean_load_mean", "mean_load_ci95",
                        "h_mean", "h_ci95"])
            for s in summaries:
                ml = np.array([run.mean_load for run in s.runs])
                hh = np.array([run.heterogeneity for run in s.runs])
                k = len(s.runs)
                ml_ci = 1.96 * ml.std(axis=0, ddof=1) / math.sqrt(k) if k > 1 else np.zeros(ml.shape[1])
                h_ci = 1.96 * hh.std(axis=0, ddof=1) / math.sqrt(k) if k > 1 else np.zeros(hh.shape[1])
                ml_m, h_m = ml.mean(axis=0), hh.mean(axis=0)
                for t in range(ml.shape[1]):
                    w.writerow([s.params.r, s.params.p_info, s.params.sigma, t, repr(float(ml_m[t])),
                                repr(float(ml_ci[t])), repr(float(h_m[t])), repr(float(h_ci[t]))])
                sdir = out / "series" / s.params.label()
                sdir.mkdir(parents=True, exist_ok=True)
                for run in s.runs:
                    with open(sdir / f"{run.rep}.csv", "w", newline="") as sf:
                        sw = csv.writer(sf)
                        sw.writerow(["tick", "mean_load", "heterogeneity"])
                        for t, (a, b) in enumerate(zip(run.mean_load, run.heterogeneity)):
                            sw.writerow([t, repr(float(a)), repr(float(b))])
    meta = {
        "tool": "bikeabm",
        "version": __version__,
        "spec": {k: v for k, v in asdict(spec).items()},
        "config": asdict(scenario.config),
        "scenario_hash": scenario.content_hash(),
        "real_standard_day": spec.real,
        "distance": "network",
        "seed_rule": "blake2b-64(base_seed:index)",
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return out
