"""Temporal and aggregated evaluation functions of a run."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class IndicatorError(ValueError):
    pass


class CoincidentStations(IndicatorError):
    pass


def load_factors(occupancies, capacities) -> np.ndarray:
    occ = np.asarray(occupancies, dtype=float)
    caps = np.asarray(capacities, dtype=float)
    return occ / caps


def mean_load(occupancies, capacities) -> np.ndarray:
    """Mean station load factor; accepts (S,) or (T, S) occupancies."""
    lf = load_factors(occupancies, capacities)
    if lf.shape[-1] < 1:
        raise IndicatorError("need at least one station")
    return lf.mean(axis=-1)


def inverse_distance_weights(station_distances) -> np.ndarray:
    d = np.asarray(station_distances, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] < 2:
        raise IndicatorError("need a square distance matrix over at least two stations")
    off = ~np.eye(len(d), dtype=bool)
    if np.any(d[off] <= 0):
        raise CoincidentStations("two distinct stations are at distance 0")
    w = np.zeros_like(d)
    w[off] = 1.0 / d[off]
    return w


def heterogeneity(occupancies, capacities, station_distances, weights=None) -> np.ndarray:
    """Distance-weighted mean absolute load-factor difference, times two.

    Both sums run over ordered pairs (s, s'), s != s'.
    """
    w = inverse_distance_weights(station_distances) if weights is None else weights
    lf = load_factors(occupancies, capacities)
    single = lf.ndim == 1
    lf2 = np.atleast_2d(lf)
    n_st = lf2.shape[1]
    chunk = max(1, 4_000_000 // max(1, n_st * n_st))
    num = np.empty(len(lf2))
    for i in range(0, len(lf2), chunk):
        block = lf2[i:i + chunk]
        num[i:i + chunk] = (np.abs(block[:, :, None] - block[:, None, :]) * w).sum(axis=(1, 2))
    h = 2.0 * num / w.sum()
    return h[0] if single else h


def adverse_rate(records: Sequence) -> float:
    if not records:
        raise IndicatorError("no travels")
    return sum(1 for r in records if r.adverse) / len(records)


@dataclass
class DetourSummary:
    value: float
    included: int
    excluded_zero_length: int
    excluded_not_completed: int


def detour_summary(records: Iterable) -> DetourSummary:
    ratios = []
    zero = skipped = 0
    for r in records:
        if not r.completed or not r.ridden:
            skipped += 1
        elif r.d_th <= 0:
            zero += 1
        else:
            ratios.append(r.d_r / r.d_th)
    value = float(np.mean(ratios)) if ratios else float("nan")
    return DetourSummary(value, len(ratios), zero, skipped)


def detour_ratio(records: Iterable) -> float:
    """Mean realized-over-shortest distance over completed rides with d_th > 0."""
    return detour_summary(records).value


def resample_to_bins(series: np.ndarray, tau_s: float, bin_seconds: int, n_bins: int) -> np.ndarray:
    """Tick series (T+1, S) sampled at the start of each demand bin."""
    stride = bin_seconds / tau_s
    if abs(stride - round(stride)) > 1e-9:
        raise IndicatorError("tick does not divide bin width")
    idx = np.arange(n_bins) * int(round(stride))
    if idx[-1] >= len(series):
        raise IndicatorError("simulated series shorter than the real one")
    return np.asarray(series)[idx]


def mse(sim_lf, real_lf) -> float:
    """Mean squared load-factor error over all (bin, station) pairs."""
    a = np.asarray(sim_lf, dtype=float)
    b = np.asarray(real_lf, dtype=float)
    if a.shape != b.shape:
        raise IndicatorError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).mean())


@dataclass
class IndicatorSeries:
    mean_load: np.ndarray
    heterogeneity: np.ndarray


@dataclass
class AggregateIndicators:
    A: float
    D_tot: float
    MSE: float | None
    meta: dict = field(default_factory=dict)


def run_indicators(result, net, real_lf: np.ndarray | None = None, tau_s: float = 60.0,
                   bin_seconds: int = 300) -> tuple[IndicatorSeries, AggregateIndicators]:
    """Indicators of a RunResult; `real_lf` is (S, bins) aligned to `net` stations."""
    caps = net.capacities
    series = IndicatorSeries(mean_load(result.occupancy, caps),
                             heterogeneity(result.occupancy, caps, net.station_distances))
    det = detour_summary(result.records)
    err = None
    if real_lf is not None:
        real = np.asarray(real_lf)
        sim = resample_to_bins(result.occupancy, tau_s, bin_seconds, real.shape[1])
        err = mse(load_factors(sim, caps), real.T)
    a = adverse_rate(result.records) if result.records else 0.0
    agg = AggregateIndicators(a, det.value, err, {
        "travels": len(result.records),
        "detour_included": det.included,
        "detour_excluded_zero_length": det.excluded_zero_length,
        "detour_excluded_not_completed": det.excluded_not_completed,
    })
    return series, agg
