"""Station-status snapshots to load-factor profiles and a standard day.

Days run from 03:00 to 03:00 local time (the offset carried by each
timestamp).  Each day is sampled on 5-minute bins; a snapshot goes to its
nearest bin.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .network import station_sort_key

log = logging.getLogger(__name__)

BIN_SECONDS = 300
BINS_PER_DAY = 24 * 3600 // BIN_SECONDS
DAY_START_HOUR = 3
MAX_LOCF_GAP = 3
MAX_MISSING_FRACTION = 0.20
WEEKDAY_SHARE = 0.70


class IngestError(ValueError):
    pass


class MalformedRecord(IngestError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class CapacityZero(IngestError):
    pass


class NonMonotonicTimestamps(IngestError):
    pass


class EmptyInput(IngestError):
    pass


class InsufficientDays(IngestError):
    pass


@dataclass(frozen=True)
class SnapshotRecord:
    station_id: str
    timestamp: datetime  # timezone-aware
    bikes: int
    capacity: int


@dataclass
class DayProfile:
    date: date
    station_ids: list[str]
    lf: np.ndarray  # (S, BINS) with NaN for missing bins

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.lf)

    @property
    def missing_fraction(self) -> float:
        return float(self.missing.mean()) if self.lf.size else 0.0


@dataclass
class StandardDay:
    station_ids: list[str]
    lf: np.ndarray  # (S, BINS)
    member_dates: list[date] = field(default_factory=list)
    cluster_label: int = 0

    @property
    def n_bins(self) -> int:
        return self.lf.shape[1]

    def reindex(self, station_ids: Sequence[str]) -> np.ndarray:
        """Rows reordered to `station_ids`; raises KeyError on a missing station."""
        pos = {sid: k for k, sid in enumerate(self.station_ids)}
        return self.lf[[pos[sid] for sid in station_ids]]


# ----------------------------------------------------------------------
# parsing


def _parse_time(raw: str) -> datetime:
    text = raw.strip()
    if text.endswith("Z") or text.endswith("z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError("timestamp lacks a UTC offset")
    return ts


def _record(line: int, row: dict) -> SnapshotRecord:
    try:
        sid = str(row["station_id"]).strip()
        ts = _parse_time(str(row["timestamp"]))
        bikes = int(row["bikes"])
        cap = int(row["capacity"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(line, str(exc)) from None
    if not sid:
        raise MalformedRecord(line, "empty station_id")
    if cap <= 0:
        raise CapacityZero(f"line {line}: station {sid} has capacity {cap}")
    if not 0 <= bikes <= cap:
        raise MalformedRecord(line, f"bikes={bikes} outside [0, {cap}]")
    return SnapshotRecord(sid, ts, bikes, cap)


def read_records(stream: io.TextIOBase | Iterable[str], fmt: str | None = None) -> Iterator[SnapshotRecord]:
    """Yield records from CSV (with header) or JSON-lines text."""
    lines = iter(stream)
    first = None
    first_no = 0
    for first_no, first in enumerate(lines, start=1):
        if first.strip():
            break
    else:
        return
    if fmt is None:
        fmt = "jsonl" if first.lstrip().startswith("{") else "csv"
    if fmt == "jsonl":
        def rows():
            yield first_no, first
            yield from enumerate(lines, start=first_no + 1)
        for no, text in rows():
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(no, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise MalformedRecord(no, "expected a JSON object")
            yield _record(no, obj)
    elif fmt == "csv":
        header = next(csv.reader([first]))
        missing = {"station_id", "timestamp", "bikes", "capacity"} - set(h.strip() for h in header)
        if missing:
            raise MalformedRecord(first_no, f"CSV header lacks {sorted(missing)}")
        header = [h.strip() for h in header]
        for no, text in enumerate(lines, start=first_no + 1):
            if not text.strip():
                continue
            values = next(csv.reader([text]))
            if len(values) != len(header):
                raise MalformedRecord(no, f"expected {len(header)} fields, got {len(values)}")
            yield _record(no, dict(zip(header, values)))
    else:
        raise ValueError(f"unknown snapshot format {fmt!r}")


def _day_and_bin(ts: datetime) -> tuple[date, int]:
    local = ts.replace(tzinfo=None) - timedelta(hours=DAY_START_HOUR)
    day = local.date()
    secs = (local - datetime(day.year, day.month, day.day)).total_seconds()
    b = int(np.floor(secs / BIN_SECONDS + 0.5))
    if b >= BINS_PER_DAY:
        day += timedelta(days=1)
        b -= BINS_PER_DAY
    return day, b


def parse_snapshots(records: Iterable[SnapshotRecord] | Iterable[Iterable[SnapshotRecord]],
                    *, check_order: bool = True) -> list[DayProfile]:
    """Bin records into one profile per calendar day.

    `records` is either one stream or a list of per-file streams; timestamps
    must be non-decreasing within each stream.
    """
    streams = list(records)
    if streams and isinstance(streams[0], SnapshotRecord):
        streams = [streams]
    obs: dict[date, dict[str, dict[int, float]]] = {}
    stations: set[str] = set()
    for stream in streams:
        last = None
        for rec in stream:
            if check_order and last is not None and rec.timestamp < last:
                raise NonMonotonicTimestamps(
                    f"station {rec.station_id}: {rec.timestamp.isoformat()} precedes {last.isoformat()}"
                )
            last = rec.timestamp
            day, b = _day_and_bin(rec.timestamp)
            stations.add(rec.station_id)
            obs.setdefault(day, {}).setdefault(rec.station_id, {})[b] = rec.bikes / rec.capacity
    ids = sorted(stations, key=station_sort_key)
    profiles = []
    for day in sorted(obs):
        lf = np.full((len(ids), BINS_PER_DAY), np.nan)
        for k, sid in enumerate(ids):
            seen = obs[day].get(sid)
            if not seen:
                continue
            last_b = None
            for b in range(BINS_PER_DAY):
                if b in seen:
                    lf[k, b] = seen[b]
                    last_b = b
                elif last_b is not None and b - last_b <= MAX_LOCF_GAP:
                    lf[k, b] = lf[k, last_b]
        prof = DayProfile(day, list(ids), lf)
        if prof.missing_fraction > MAX_MISSING_FRACTION:
            log.info("discarding %s: %.0f%% bins missing", day, 100 * prof.missing_fraction)
            continue
        profiles.append(prof)
    return profiles


def parse_files(paths: Sequence[str | Path]) -> list[DayProfile]:
    streams = []
    for p in paths:
        fmt = "jsonl" if str(p).endswith((".jsonl", ".ndjson")) else None
        with open(p) as fh:
            streams.append(list(read_records(fh, fmt)))
    return parse_snapshots(streams)


def profile_to_records(profile: DayProfile, capacities: dict[str, int],
                       tz_offset: timedelta = timedelta(0)) -> list[SnapshotRecord]:
    """One snapshot per observed bin, at the bin's center time."""
    tz = timezone(tz_offset)
    start = datetime(profile.date.year, profile.date.month, profile.date.day,
                     DAY_START_HOUR, tzinfo=tz)
    out = []
    for b in range(profile.lf.shape[1]):
        ts = start + timedelta(seconds=b * BIN_SECONDS)
        for k, sid in enumerate(profile.station_ids):
            v = profile.lf[k, b]
            if np.isnan(v):
                continue
            cap = capacities[sid]
            out.append(SnapshotRecord(sid, ts, int(round(v * cap)), cap))
    return out


# ----------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    wcss: float
    history: list[float]

    @property
    def n_iter(self) -> int:
        return len(self.history)


def _wcss(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int) -> KMeansResult:
    history: list[float] = []
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        cost = _wcss(x, centroids, new_labels)
        if history and cost > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"WCSS increased from {history[-1]} to {cost}")
        history.append(cost)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(len(centroids)):
            members = x[labels == j]
            if len(members):  # empty clusters keep their previous centroid
                centroids[j] = members.mean(axis=0)
    labels = np.argmin(((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2), axis=1)
    return KMeansResult(labels, centroids, _wcss(x, centroids, labels), history)


def kmeans(points, k: int, seed: int = 0, *, n_init: int = 4, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of `n_init` restarts."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        raise EmptyInput("kmeans needs at least one point")
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} must lie in [1, {len(x)}]")
    if np.isnan(x).any():
        raise ValueError("kmeans input contains missing entries")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(x, _plusplus(x, k, rng), max_iter)
        if best is None or res.wcss < best.wcss:
            best = res
    return best


# ----------------------------------------------------------------------
# standard day


def _filled(lf: np.ndarray) -> np.ndarray:
    """Missing entries replaced by the station's mean (0.5 if never observed)."""
    out = lf.copy()
    means = np.nanmean(np.where(np.isnan(lf).all(axis=1, keepdims=True), 0.5, lf), axis=1)
    rows, cols = np.nonzero(np.isnan(out))
    out[rows, cols] = means[rows]
    return out


def compress_day(lf: np.ndarray, k_inner: int, seed: int) -> np.ndarray:
    """Cluster a day's time bins into `k_inner` representative bins.

    Centroids are ordered by the mean bin index of their members so that
    vectors from different days line up.
    """
    bins = _filled(lf).T  # (BINS, S)
    k = min(k_inner, len(bins))
    res = kmeans(bins, k, seed)
    order_key = []
    for j in range(k):
        idx = np.flatnonzero(res.labels == j)
        order_key.append((idx.mean() if len(idx) else np.inf, j))
    order = [j for _, j in sorted(order_key)]
    return res.centroids[order].ravel()


def reduce_days(profiles: Sequence[DayProfile], k_inner: int = 24, k_day: int = 3,
                seed: int = 0) -> StandardDay:
    if len(profiles) < 2:
        raise InsufficientDays(f"need at least 2 day profiles, got {len(profiles)}")
    profiles = sorted(profiles, key=lambda p: p.date)
    ids = sorted({sid for p in profiles for sid in p.station_ids}, key=station_sort_key)
    full = np.full((len(profiles), len(ids), BINS_PER_DAY), np.nan)
    for d, p in enumerate(profiles):
        pos = {sid: k for k, sid in enumerate(p.station_ids)}
        for k, sid in enumerate(ids):
            if sid in pos:
                full[d, k] = p.lf[pos[sid]]
    reduced = np.array([compress_day(full[d], k_inner, seed) for d in range(len(profiles))])
    k = min(k_day, len(profiles))
    res = kmeans(reduced, k, seed)
    best_label, best_size = None, -1
    for j in range(k):
        members = np.flatnonzero(res.labels == j)
        if not len(members):
            continue
        weekday = np.mean([profiles[m].date.weekday() < 5 for m in members])
        if weekday >= WEEKDAY_SHARE and len(members) > best_size:
            best_label, best_size = j, len(members)
    if best_label is None:
        raise InsufficientDays("no day cluster is at least 70% Monday-Friday")
    members = np.flatnonzero(res.labels == best_label)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices are filled below
        mean = np.nanmean(full[members], axis=0)
    mean = _fill_time_gaps(mean)
    return StandardDay(list(ids), np.clip(mean, 0.0, 1.0),
                       [profiles[m].date for m in members], int(best_label))


def _fill_time_gaps(lf: np.ndarray) -> np.ndarray:
    out = lf.copy()
    for row in out:
        bad = np.isnan(row)
        if bad.all():
            row[:] = 0.0
        elif bad.any():
            idx = np.arange(len(row))
            row[bad] = np.interp(idx[bad], idx[~bad], row[~bad])
    return out


# ----------------------------------------------------------------------
# standard day CSV


def write_standard_day(std: StandardDay, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "bin_index", "lf"])
        for k, sid in enumerate(std.station_ids):
            for b, v in enumerate(std.lf[k]):
                w.writerow([sid, b, repr(float(v))])


def read_standard_day(path: str | Path) -> StandardDay:
    values: dict[str, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"station_id", "bin_index", "lf"} - set(reader.fieldnames):
            raise IngestError(f"{path}: expected columns station_id,bin_index,lf")
        for no, row in enumerate(reader, start=2):
            try:
                b = int(row["bin_index"])
                v = float(row["lf"])
            except (TypeError, ValueError) as exc:
                raise MalformedRecord(no, str(exc)) from None
            if not 0.0 <= v <= 1.0:
                raise MalformedRecord(no, f"load factor {v} outside [0, 1]")
            values.setdefault(row["station_id"], {})[b] = v
    ids = sorted(values, key=station_sort_key)
    n_bins = 1 + max((max(v) for v in values.values()), default=-1)
    lf = np.full((len(ids), n_bins), np.nan)
    for k, sid in enumerate(ids):
        for b, v in values[sid].items():
            lf[k, b] = v
    if np.isnan(lf).any():
        raise IngestError(f"{path}: standard day has missing (station, bin) entries")
    return StandardDay(ids, lf)
