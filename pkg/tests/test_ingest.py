import io
import itertools
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bikeabm.ingest import (BINS_PER_DAY, CapacityZero, DayProfile, InsufficientDays, MalformedRecord,
                            NonMonotonicTimestamps, SnapshotRecord, StandardDay, kmeans,
                            parse_snapshots, profile_to_records, read_records, read_standard_day,
                            reduce_days, write_standard_day)

TZ = timezone(timedelta(hours=2))


def day_records(day, sid, bikes, cap, step_bins=1):
    start = datetime(day.year, day.month, day.day, 3, tzinfo=TZ)
    return [SnapshotRecord(sid, start + timedelta(minutes=5 * b), bikes(b) if callable(bikes) else bikes, cap)
            for b in range(0, BINS_PER_DAY, step_bins)]


def test_empty_input():
    assert parse_snapshots([]) == []
    assert list(read_records(io.StringIO(""))) == []


def test_full_station_constant():
    prof = parse_snapshots(day_records(date(2024, 3, 4), "7", 12, 12))
    assert len(prof) == 1
    assert np.all(prof[0].lf == 1.0)


def test_quarter_load():
    prof = parse_snapshots(day_records(date(2024, 3, 4), "7", 5, 20))
    assert np.all(prof[0].lf == 0.25)


def bin_of(rec):
    return int((rec.timestamp - datetime(2024, 3, 4, 3, tzinfo=TZ)).total_seconds() // 300)


def test_short_gaps_carried_forward_long_gaps_missing():
    recs = [r for r in day_records(date(2024, 3, 4), "1", lambda b: b % 10, 10)
            if not 100 < bin_of(r) <= 103]
    prof = parse_snapshots(recs)[0]
    assert not np.isnan(prof.lf).any()
    assert prof.lf[0, 103] == prof.lf[0, 100]

    recs = [r for r in day_records(date(2024, 3, 4), "1", 4, 10) if not 100 < bin_of(r) <= 104]
    prof = parse_snapshots(recs)[0]
    assert np.isnan(prof.lf[0, 104]) and not np.isnan(prof.lf[0, 103])

    recs = [r for r in day_records(date(2024, 3, 4), "1", 4, 10) if not 50 <= bin_of(r) < 120]
    assert parse_snapshots(recs) == []  # 67 of 288 bins missing after carry-forward


def test_day_starts_at_three():
    early = SnapshotRecord("1", datetime(2024, 3, 5, 2, 55, tzinfo=TZ), 3, 10)
    recs = day_records(date(2024, 3, 4), "1", 5, 10)[:-1] + [early]
    prof = parse_snapshots(recs)
    assert [p.date for p in prof] == [date(2024, 3, 4)]
    assert prof[0].lf[0, -1] == 0.3


def test_parse_errors():
    with pytest.raises(MalformedRecord) as exc:
        list(read_records(io.StringIO("station_id,timestamp,bikes,capacity\n1,2024-01-01T03:00:00Z,x,10\n")))
    assert exc.value.line == 2
    with pytest.raises(CapacityZero):
        list(read_records(io.StringIO('{"station_id":"1","timestamp":"2024-01-01T03:00:00Z","bikes":0,"capacity":0}\n')))
    recs = day_records(date(2024, 3, 4), "1", 5, 10)
    with pytest.raises(NonMonotonicTimestamps):
        parse_snapshots([recs[5], recs[2]])


def test_csv_and_jsonl_agree():
    csv_text = ("station_id,timestamp,bikes,capacity\n"
                "3,2024-03-04T05:00:00+02:00,4,8\n")
    jl = '{"station_id": "3", "timestamp": "2024-03-04T05:00:00+02:00", "bikes": 4, "capacity": 8}\n'
    assert list(read_records(io.StringIO(csv_text))) == list(read_records(io.StringIO(jl)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_parse_roundtrip_bit_exact(seed):
    rng = np.random.default_rng(seed)
    caps = {str(k): int(rng.integers(1, 40)) for k in range(1, int(rng.integers(2, 6)))}
    ids = sorted(caps, key=int)
    lf = np.array([rng.integers(0, caps[s] + 1, BINS_PER_DAY) / caps[s] for s in ids])
    holes = rng.random(lf.shape) < 0.02
    lf[holes] = np.nan
    prof = DayProfile(date(2024, 5, 7), ids, lf)
    back = parse_snapshots(profile_to_records(prof, caps))
    assert len(back) == 1
    # carried-forward holes become the previous value; everything observed is bit-exact
    obs = ~np.isnan(lf)
    assert np.array_equal(back[0].lf[obs], lf[obs])
    full = np.nan_to_num(lf, nan=-1.0)
    clean = DayProfile(prof.date, ids, np.where(np.isnan(lf), np.roll(full, 1, axis=1), lf))
    if not (clean.lf < 0).any() and not np.isnan(clean.lf).any():
        back2 = parse_snapshots(profile_to_records(clean, caps))
        assert np.array_equal(back2[0].lf, clean.lf)


# ----------------------------------------------------------------------
# k-means


def test_kmeans_k1_is_mean():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 3))
    res = kmeans(x, 1)
    assert np.allclose(res.centroids[0], x.mean(axis=0))
    assert res.wcss == pytest.approx(x.var(axis=0).sum() * len(x))


def test_kmeans_k_equals_n():
    x = np.arange(12, dtype=float).reshape(6, 2) ** 1.5
    res = kmeans(x, 6)
    assert res.wcss == pytest.approx(0.0, abs=1e-12)
    assert sorted(res.labels.tolist()) == list(range(6))


def brute_force_two_partition(x):
    n = len(x)
    best = np.inf
    for mask in range(1, 2 ** (n - 1)):
        sel = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        cost = sum(((g - g.mean(axis=0)) ** 2).sum() for g in (x[sel], x[~sel]))
        best = min(best, cost)
    return best


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 12))
def test_kmeans_two_blobs_exact(seed, n):
    rng = np.random.default_rng(seed)
    truth = np.arange(n) % 2
    x = rng.normal(size=(n, 2)) + np.where(truth[:, None] == 1, [10.0, 0.0], [0.0, 0.0])
    res = kmeans(x, 2, seed=seed)
    same = np.array_equal(res.labels, truth) or np.array_equal(res.labels, 1 - truth)
    assert same
    assert res.wcss == pytest.approx(brute_force_two_partition(x), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kmeans_wcss_monotone(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(5, 60)), 3))
    res = kmeans(x, int(rng.integers(1, 5)), seed=seed)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))


# ----------------------------------------------------------------------
# standard day


def smooth_profile(rng, n_st, phase):
    t = np.arange(BINS_PER_DAY)
    base = 0.5 + 0.35 * np.sin(2 * np.pi * (t / BINS_PER_DAY + phase))
    return np.clip(base + 0.05 * rng.normal(size=(n_st, 1)), 0, 1)


def test_identical_days_give_that_day():
    rng = np.random.default_rng(1)
    lf = smooth_profile(rng, 4, 0.0)
    days = [DayProfile(date(2024, 3, 4) + timedelta(days=d), list("1234"), lf.copy()) for d in range(7)]
    std = reduce_days(days, k_day=1)
    assert np.allclose(std.lf, lf, atol=1e-15)


def test_weekday_weekend_recovery():
    rng = np.random.default_rng(2)
    wk = smooth_profile(rng, 5, 0.0)
    we = smooth_profile(rng, 5, 0.5)
    days, d = [], date(2024, 3, 4)  # a Monday
    while len([p for p in days if p.date.weekday() < 5]) < 10 or len([p for p in days if p.date.weekday() >= 5]) < 4:
        lf = wk if d.weekday() < 5 else we
        days.append(DayProfile(d, list("12345"), lf.copy()))
        d += timedelta(days=1)
    std = reduce_days(days, k_inner=24, k_day=2, seed=3)
    assert std.member_dates == [p.date for p in days if p.date.weekday() < 5]
    assert np.allclose(std.lf, wk, rtol=0, atol=1e-12)


def test_single_cluster_is_global_mean():
    rng = np.random.default_rng(3)
    days = [DayProfile(date(2024, 3, 4) + timedelta(days=d), ["1", "2"], rng.random((2, BINS_PER_DAY)))
            for d in range(5)]
    std = reduce_days(days, k_day=1)
    assert np.allclose(std.lf, np.mean([p.lf for p in days], axis=0))


def test_reduce_needs_weekday_cluster():
    lf = np.full((1, BINS_PER_DAY), 0.5)
    days = [DayProfile(date(2024, 3, 9), ["1"], lf), DayProfile(date(2024, 3, 10), ["1"], lf)]
    with pytest.raises(InsufficientDays):
        reduce_days(days, k_day=1)


def test_standard_day_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    std = StandardDay(["2", "10", "1"], rng.random((3, BINS_PER_DAY)))
    p = tmp_path / "std.csv"
    write_standard_day(std, p)
    back = read_standard_day(p)
    assert back.station_ids == ["1", "2", "10"]
    assert np.array_equal(back.reindex(std.station_ids), std.lf)
