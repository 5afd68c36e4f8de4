"""Acceptance criteria, each at its stated tolerance.

Every test logs one PASS/FAIL line, printed together at the end of the
pytest run.  Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import subprocess
import sys
import time
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pytest

import oracles
from acceptance_log import criterion
from bikeabm.demand import Grid, estimate_field
from bikeabm.experiments import (Params, SweepSpec, calibrate, default_jobs, required_replications,
                                 run_point, run_sweep, simulated_standard_day)
from bikeabm.indicators import (adverse_rate, detour_ratio, heterogeneity, mean_load, mse,
                                resample_to_bins)
from bikeabm.ingest import BINS_PER_DAY, DayProfile, kmeans, reduce_days
from bikeabm.scenario import SyntheticSpec, generate_synthetic
from bikeabm.simcore import simulate
from conftest import SYNTHETIC

SIGMA_GRID = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
PINFO_GRID = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
# (scenario seed, sigma*, p_info*) per calibration trial; truths sit inside the grid
TRIALS = [(11, 4.0, 0.4), (12, 8.0, 0.6), (13, 16.0, 0.4), (14, 4.0, 0.6), (15, 8.0, 0.4)]


@criterion(1, "conservation and bounds, 20 seeds x 24 h")
def test_conservation_and_bounds(synthetic):
    caps = synthetic.net.capacities
    init = synthetic.initial_bikes()
    synthetic.net.distances  # routing tables are built once per scenario, outside the timing
    t0 = time.perf_counter()
    for seed in range(20):
        res = simulate(synthetic.net, synthetic.demand, synthetic.config, init, seed)
        occ = res.occupancy
        assert occ.shape == (1441, len(caps))
        assert (occ >= 0).all() and (occ <= caps).all(), seed
        lhs = occ.sum(axis=1) + res.in_transit
        assert np.array_equal(lhs, init.sum() + res.entered - res.exited), seed
    took = time.perf_counter() - t0
    assert took < 5.0, f"{took:.2f}s"
    return f"{took:.2f}s for 20 runs"


def _sim_cli(seed, events):
    return subprocess.run([sys.executable, "-m", "bikeabm.cli", "simulate", str(SYNTHETIC), "--seed", str(seed),
                           "--events-out", str(events)], capture_output=True, text=True, check=True).stdout


def _tree(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@criterion(2, "bit-identical logs across processes and --jobs 1 vs 8")
def test_determinism(tmp_path):
    a = _sim_cli(21, tmp_path / "a.jsonl")
    b = _sim_cli(21, tmp_path / "b.jsonl")
    assert a == b
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    spec = dict(scenario=str(SYNTHETIC), r=[200.0, 400.0], p_info=[0.0, 1.0], sigma=[50.0],
                replications=3, base_seed=5)
    one = run_sweep(SweepSpec(name="j", results_dir=str(tmp_path / "one"), **spec), jobs=1)
    eight = run_sweep(SweepSpec(name="j", results_dir=str(tmp_path / "eight"), **spec), jobs=8)
    t1, t8 = _tree(one), _tree(eight)
    t1.pop("meta.json"), t8.pop("meta.json")  # records the results path
    assert t1.keys() == t8.keys() and t1 == t8
    return f"{len(t1)} result files identical"


@criterion(3, "indicator oracles on 1000 random cases, tol 1e-9")
def test_indicator_oracles():
    rng = np.random.default_rng(2024)
    tol = 1e-9
    for case in range(1000):
        s = int(rng.integers(2, 10))
        caps = rng.integers(1, 50, s)
        occ = rng.integers(0, caps + 1)
        d = rng.uniform(10, 3000, (s, s))
        d = (d + d.T) / 2
        np.fill_diagonal(d, 0)
        h = heterogeneity(occ, caps, d)
        assert abs(h - oracles.heterogeneity_ordered(occ, caps, d.tolist())) <= tol
        assert abs(h - oracles.heterogeneity_unordered(occ, caps, d.tolist())) <= tol
        assert abs(heterogeneity(occ, caps, d * rng.uniform(1e-3, 1e3)) - h) <= tol
        assert abs(mean_load(occ, caps) - oracles.mean_load(occ, caps)) <= tol
        n = int(rng.integers(1, 40))
        recs = [type("R", (), dict(adverse=bool(rng.random() < 0.3), completed=bool(rng.random() < 0.9),
                                   ridden=bool(rng.random() < 0.95), d_th=float(rng.choice([0.0, rng.uniform(1, 2000)])),
                                   d_r=float(rng.uniform(0, 4000)))) for _ in range(n)]
        assert abs(adverse_rate(recs) - oracles.adverse_rate([r.adverse for r in recs])) <= tol
        got, want = detour_ratio(recs), oracles.detour_ratio(recs)
        assert (np.isnan(got) and np.isnan(want)) or abs(got - want) <= tol
        series = rng.integers(0, caps + 1, (1441, s))
        real = rng.random((288, s))
        sim_lf = resample_to_bins(series, 60, 300, 288) / caps
        naive = oracles.mse([[series[5 * b, k] / caps[k] for k in range(s)] for b in range(288)], real.tolist())
        assert abs(mse(sim_lf, real) - naive) <= tol
    return "h (both conventions, rescaled), mean load, A, D_tot, MSE"


@criterion(4, "required_replications default in [60, 62]")
def test_repetition_rule():
    n = required_replications()
    assert 60 <= n <= 62 and n == 62
    assert required_replications(1.0) == 16 and required_replications(0.25) == 246
    return f"n={n}"


@pytest.mark.slow
@criterion(5, "self-calibration recovers (sigma*, p*) within one cell in >= 4 of 5 trials")
def test_self_calibration():
    jobs = default_jobs()
    t0 = time.perf_counter()
    hits, notes = 0, []
    for seed, sigma, p in TRIALS:
        sc = generate_synthetic(SyntheticSpec(seed=seed))
        target = simulated_standard_day(sc, sigma, p, required_replications(), base_seed=1000 + seed, jobs=jobs)
        res = calibrate(sc, target, SIGMA_GRID, PINFO_GRID, [400.0], 20, base_seed=seed, jobs=jobs)
        best = res.best[400.0]
        ds = abs(SIGMA_GRID.index(best.sigma) - SIGMA_GRID.index(sigma))
        dp = abs(PINFO_GRID.index(best.p_info) - PINFO_GRID.index(p))
        ok = ds <= 1 and dp <= 1
        hits += ok
        notes.append(f"({sigma:g},{p:g})->({best.sigma:g},{best.p_info:g}){'' if ok else '!'}")
    took = time.perf_counter() - t0
    print(f"calibration trials: {' '.join(notes)}; {took:.0f}s on {jobs} worker(s)")
    assert hits >= 4, notes
    assert took < 600, f"{took:.0f}s"
    return f"{hits}/5 [{' '.join(notes)}] in {took:.0f}s"


@pytest.mark.slow
@criterion(6, "information lowers A at r=400 m with disjoint 95% CIs, n=60")
def test_information_effect(synthetic):
    lo = run_point(Params(400.0, 0.0, synthetic.config.sigma), synthetic, 60, 77)
    hi = run_point(Params(400.0, 1.0, synthetic.config.sigma), synthetic, 60, 77)
    a0, c0 = lo.mean["A"], lo.ci["A"]
    a1, c1 = hi.mean["A"], hi.ci["A"]
    assert a1 < a0
    assert a1 + c1 < a0 - c0
    skew = max(abs(lo.skew["A"]), abs(hi.skew["A"]))
    advisory = "ok" if skew < 1 else "above 1"
    return f"A(0)={a0:.4f}±{c0:.4f} A(1)={a1:.4f}±{c1:.4f}; |skew| {skew:.2f} ({advisory}, advisory)"


@criterion(7, "calibration on real data is documented, not run in CI")
def test_real_data_calibration_is_documented():
    readme = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    assert "real data" in readme.lower()
    return "not gating; see README"


@criterion(8, "KDE limits: flat within 1%, delta in one cell, rows sum to 1 +- 1e-9")
def test_kde_limits():
    ring = np.array([[0, 0], [2000, 0], [2000, 2000], [0, 2000]], dtype=float)
    grid = Grid.covering(ring, 100.0)
    diameter = float(np.hypot(2000, 2000))
    rng = np.random.default_rng(8)
    pos = rng.uniform(0, 2000, (12, 2))
    counts = rng.integers(0, 5, (12, 30))
    flat = estimate_field(pos, counts, 1000 * diameter, grid).values
    u = grid.uniform()
    assert np.all(np.abs(flat - u) <= 0.01 * u)
    delta = estimate_field(np.array([[1050.0, 1050.0]]), np.ones((1, 1)), 1e-3, grid).values[0]
    assert delta[grid.cell_of((1050.0, 1050.0))] == pytest.approx(1.0, abs=1e-12)
    for h in (1e-3, 10.0, 50.0, 300.0, 5000.0):
        vals = estimate_field(pos, counts, h, grid).values
        assert np.all(np.abs(vals.sum(axis=1) - 1) <= 1e-9)
    return None


@criterion(9, "k-means: monotone WCSS, exact two-blob and weekday/weekend recovery")
def test_kmeans_properties():
    rng = np.random.default_rng(9)
    for trial in range(50):
        x = rng.normal(size=(int(rng.integers(5, 80)), int(rng.integers(1, 5))))
        res = kmeans(x, int(rng.integers(1, 6)), seed=trial)
        assert np.all(np.diff(res.history) <= 1e-9 * max(1.0, res.history[0]))
    for trial in range(20):
        truth = np.arange(40) % 2
        x = rng.normal(size=(40, 2)) + truth[:, None] * np.array([10.0, 0.0])
        labels = kmeans(x, 2, seed=trial).labels
        assert np.array_equal(labels, truth) or np.array_equal(labels, 1 - truth)
    t = np.arange(BINS_PER_DAY)
    wk = np.clip(0.5 + 0.4 * np.sin(2 * np.pi * t / BINS_PER_DAY) * np.array([[1], [-1], [0.5]]), 0, 1)
    we = np.clip(0.5 + 0.1 * np.cos(2 * np.pi * t / BINS_PER_DAY) * np.array([[1], [1], [-1]]), 0, 1)
    days = [DayProfile(date(2024, 1, 1) + timedelta(days=d), ["1", "2", "3"],
                       (wk if (date(2024, 1, 1) + timedelta(days=d)).weekday() < 5 else we).copy())
            for d in range(21)]
    std = reduce_days(days, k_day=2)
    assert std.member_dates == [p.date for p in days if p.date.weekday() < 5]
    assert np.allclose(std.lf, wk, rtol=0, atol=1e-12)
    return None


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
