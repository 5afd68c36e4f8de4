"""Demand model: origin/destination probability fields and boundary processes.

Fields live on a regular lattice over the district's bounding box; cells whose
centers fall outside the district polygon carry no mass.  Each time bin is an
independent probability distribution over cells.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import BIN_SECONDS, StandardDay
from .network import StreetNetwork, points_in_polygon

FORMAT_VERSION = 1
DEFAULT_GRID_CELL_M = 50.0


class DemandError(ValueError):
    pass


def round_half_away(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def bandwidth_for(sigma: float, diameter: float) -> float:
    """Kernel bandwidth in meters; the spread shrinks as sigma grows."""
    if not sigma > 0:
        raise DemandError(f"sigma must be positive, got {sigma}")
    return diameter / (2.0 * sigma)


@dataclass(frozen=True)
class KernelSpec:
    sigma: float
    diameter: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DemandError(f"sigma must be positive, got {self.sigma}")

    @property
    def bandwidth(self) -> float:
        return bandwidth_for(self.sigma, self.diameter)


@dataclass
class Grid:
    x0: float
    y0: float
    cell: float
    nx: int
    ny: int
    mask: np.ndarray  # (ny*nx,) bool, row-major (y outer)

    @classmethod
    def covering(cls, ring: np.ndarray, cell: float = DEFAULT_GRID_CELL_M) -> "Grid":
        lo, hi = ring.min(axis=0), ring.max(axis=0)
        nx = max(1, int(np.ceil((hi[0] - lo[0]) / cell - 1e-9)))
        ny = max(1, int(np.ceil((hi[1] - lo[1]) / cell - 1e-9)))
        grid = cls(float(lo[0]), float(lo[1]), float(cell), nx, ny, np.ones(nx * ny, dtype=bool))
        inside = points_in_polygon(grid.centers, ring)
        if inside.any():
            grid.mask = inside
        return grid

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def centers(self) -> np.ndarray:
        ix = np.arange(self.nx)
        iy = np.arange(self.ny)
        xs = self.x0 + (ix + 0.5) * self.cell
        ys = self.y0 + (iy + 0.5) * self.cell
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def cell_of(self, point) -> int:
        ix = int(np.clip((point[0] - self.x0) // self.cell, 0, self.nx - 1))
        iy = int(np.clip((point[1] - self.y0) // self.cell, 0, self.ny - 1))
        return iy * self.nx + ix

    def uniform(self) -> np.ndarray:
        return self.mask / self.mask.sum()

    def to_json(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "cell_m": self.cell, "nx": self.nx, "ny": self.ny,
                "mask": _b64(self.mask.astype(np.uint8))}

    @classmethod
    def from_json(cls, doc: dict) -> "Grid":
        mask = _unb64(doc["mask"], np.uint8).astype(bool)
        return cls(float(doc["x0"]), float(doc["y0"]), float(doc["cell_m"]),
                   int(doc["nx"]), int(doc["ny"]), mask)


@dataclass
class SpatioTemporalField:
    grid: Grid
    values: np.ndarray  # (T, cells), each row sums to 1
    _cdf: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    def _cdf_for(self, bin_index: int) -> np.ndarray:
        cdf = self._cdf.get(bin_index)
        if cdf is None:
            cdf = np.cumsum(self.values[bin_index])
            self._cdf[bin_index] = cdf
        return cdf

    def sample_points(self, bin_index: int, n: int, rng: np.random.Generator) -> np.ndarray:
        """(n, 2) points: a cell drawn by probability, then a uniform spot inside it."""
        cdf = self._cdf_for(bin_index)
        u = rng.random(n) * cdf[-1]
        k = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        g = self.grid
        iy, ix = np.divmod(k, g.nx)
        jitter = rng.random((n, 2))
        return np.column_stack([g.x0 + (ix + jitter[:, 0]) * g.cell,
                                g.y0 + (iy + jitter[:, 1]) * g.cell])

    @property
    def _stacked_cdf(self) -> np.ndarray:
        """Row cdfs offset by their bin index, flattened into one increasing array."""
        flat = self._cdf.get("stacked")
        if flat is None:
            cdf = np.cumsum(self.values, axis=1)
            cdf /= cdf[:, -1:]
            flat = (cdf + np.arange(self.n_bins)[:, None]).ravel()
            self._cdf["stacked"] = flat
        return flat

    def sample_points_in_bins(self, bins: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One point per entry of `bins`, each drawn from its own bin's distribution."""
        bins = np.asarray(bins, dtype=np.int64)
        n = len(bins)
        cells = self.grid.size
        u = bins + rng.random(n)
        k = np.searchsorted(self._stacked_cdf, u, side="right") - bins * cells
        k = np.clip(k, 0, cells - 1)
        g = self.grid
        iy, ix = np.divmod(k, g.nx)
        jitter = rng.random((n, 2))
        return np.column_stack([g.x0 + (ix + jitter[:, 0]) * g.cell,
                                g.y0 + (iy + jitter[:, 1]) * g.cell])

    def sample_point(self, bin_index: int, rng: np.random.Generator) -> tuple[float, float]:
        x, y = self.sample_points(bin_index, 1, rng)[0]
        return float(x), float(y)


def estimate_field(positions: np.ndarray, counts: np.ndarray, bandwidth: float,
                   grid: Grid) -> SpatioTemporalField:
    """Gaussian multi-kernel estimate, one normalized distribution per bin.

    positions: (P, 2) event locations; counts: (P, T) events per location and
    bin.  Bins without events get the uniform distribution.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    counts = np.asarray(counts, dtype=float).reshape(len(positions), -1)
    if not bandwidth > 0:
        raise DemandError("bandwidth must be positive")
    n_bins = counts.shape[1]
    centers = grid.centers[grid.mask]
    values = np.tile(grid.uniform(), (n_bins, 1))
    active_bins = np.flatnonzero(counts.sum(axis=0) > 0)
    if len(active_bins) == 0 or len(positions) == 0:
        return SpatioTemporalField(grid, values)
    d2 = ((centers[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2)  # (M, P)
    dmin = d2.min(axis=0)
    # per-bin shift by the closest active kernel keeps the largest term at exp(0)
    shifts = np.array([dmin[counts[:, t] > 0].min() for t in active_bins])
    two_h2 = 2.0 * bandwidth * bandwidth
    for shift in np.unique(shifts):
        bins = active_bins[shifts == shift]
        # active events have d2 >= shift; the clamp only touches zero-count
        # events, whose overflow would otherwise turn 0 * inf into NaN
        kern = np.exp(-np.maximum(d2 - shift, 0.0) / two_h2)
        w = kern @ counts[:, bins]  # (M, nb)
        w /= w.sum(axis=0, keepdims=True)
        full = np.zeros((grid.size, len(bins)))
        full[grid.mask] = w
        values[bins] = full.T
    return SpatioTemporalField(grid, values)


def field_entropy(values: np.ndarray) -> np.ndarray:
    p = np.asarray(values)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


@dataclass
class Events:
    departures: np.ndarray  # (S, T) int
    arrivals: np.ndarray  # (S, T) int


def infer_events(lf: np.ndarray, capacities: np.ndarray) -> Events:
    """Bike movements implied by load-factor changes between consecutive bins.

    The bike level is rounded half away from zero at every bin, so the
    fractional remainder carries over instead of drifting.
    """
    lf = np.asarray(lf, dtype=float)
    caps = np.asarray(capacities, dtype=float)[:, None]
    level = round_half_away(lf * caps)
    delta = np.zeros_like(level)
    delta[:, 1:] = np.diff(level, axis=1)
    departures = np.where(delta < 0, -delta, 0).astype(np.int64)
    arrivals = np.where(delta > 0, delta, 0).astype(np.int64)
    return Events(departures, arrivals)


@dataclass
class BoundaryProcess:
    entry_nodes: list[int]
    entry_trials: np.ndarray  # (I, T) int
    entry_prob: float
    departure_trials: np.ndarray  # (T,) int
    departure_prob: float = 1.0
    clamped: int = 0

    @property
    def n_bins(self) -> int:
        return self.departure_trials.shape[0]

    def sample_counts(self, bin_index: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        entries = rng.binomial(self.entry_trials[:, bin_index], self.entry_prob)
        n = int(self.departure_trials[bin_index])
        if self.departure_prob >= 1.0:
            departures = n
        else:
            departures = int(rng.binomial(n, self.departure_prob))
        return entries, departures


def build_boundary_processes(events: Events, net: StreetNetwork, mean_speed: float,
                             bin_seconds: int = BIN_SECONDS) -> BoundaryProcess:
    """Entry trials are shifted earlier by the ride time from each entry to the arrival station."""
    entries = list(net.boundary_points)
    if not entries:
        raise DemandError("network has no boundary points")
    if not mean_speed > 0:
        raise DemandError("mean speed must be positive")
    n_bins = events.arrivals.shape[1]
    trials = np.zeros((len(entries), n_bins), dtype=np.int64)
    clamped = 0
    dist = net.node_station_distances[entries]  # (I, S)
    offsets = round_half_away(dist / mean_speed / bin_seconds).astype(np.int64)
    for s, t in zip(*np.nonzero(events.arrivals)):
        n = events.arrivals[s, t]
        for i in range(len(entries)):
            tb = t - offsets[i, s]
            if tb < 0:
                clamped += 1
                tb = 0
            trials[i, tb] += n
    return BoundaryProcess(entries, trials, 1.0 / len(entries),
                           events.departures.sum(axis=0).astype(np.int64), 1.0, clamped)


@dataclass
class DemandModel:
    station_ids: list[str]
    sigma: float
    bandwidth: float
    bin_seconds: int
    origin: SpatioTemporalField
    destination: SpatioTemporalField
    boundary: BoundaryProcess
    entry_points: list[list[float]] = field(default_factory=list)

    @property
    def n_bins(self) -> int:
        return self.origin.n_bins

    def to_json(self) -> dict:
        b = self.boundary
        return {
            "version": FORMAT_VERSION,
            "sigma": self.sigma,
            "bandwidth_m": self.bandwidth,
            "bin_seconds": self.bin_seconds,
            "n_bins": self.n_bins,
            "station_ids": self.station_ids,
            "grid": self.origin.grid.to_json(),
            "origin": _b64(self.origin.values),
            "destination": _b64(self.destination.values),
            "boundary": {
                "entry_nodes": b.entry_nodes,
                "entry_points": self.entry_points,
                "entry_prob": b.entry_prob,
                "entry_trials": b.entry_trials.tolist(),
                "departure_prob": b.departure_prob,
                "departure_trials": b.departure_trials.tolist(),
                "clamped": b.clamped,
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DemandModel":
        if doc.get("version") != FORMAT_VERSION:
            raise DemandError(f"unsupported demand model version {doc.get('version')!r}")
        grid = Grid.from_json(doc["grid"])
        n_bins = int(doc["n_bins"])
        origin = _unb64(doc["origin"], np.float64).reshape(n_bins, grid.size)
        dest = _unb64(doc["destination"], np.float64).reshape(n_bins, grid.size)
        bd = doc["boundary"]
        boundary = BoundaryProcess(
            [int(n) for n in bd["entry_nodes"]],
            np.asarray(bd["entry_trials"], dtype=np.int64).reshape(len(bd["entry_nodes"]), n_bins),
            float(bd["entry_prob"]),
            np.asarray(bd["departure_trials"], dtype=np.int64),
            float(bd["departure_prob"]),
            int(bd.get("clamped", 0)),
        )
        return cls([str(s) for s in doc["station_ids"]], float(doc["sigma"]), float(doc["bandwidth_m"]),
                   int(doc["bin_seconds"]), SpatioTemporalField(grid, origin),
                   SpatioTemporalField(grid, dest), boundary,
                   [list(map(float, p)) for p in bd.get("entry_points", [])])

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "DemandModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def build_demand(std: StandardDay, net: StreetNetwork, sigma: float, *,
                 grid_cell: float = DEFAULT_GRID_CELL_M, mean_speed: float = 14 / 3.6) -> DemandModel:
    lf = std.reindex(net.station_ids)
    events = infer_events(lf, net.capacities)
    return build_demand_from_events(events, net, sigma, grid_cell=grid_cell, mean_speed=mean_speed)


def build_demand_from_events(events: Events, net: StreetNetwork, sigma: float, *,
                             grid_cell: float = DEFAULT_GRID_CELL_M,
                             mean_speed: float = 14 / 3.6) -> DemandModel:
    spec = KernelSpec(sigma, net.diameter)
    grid = Grid.covering(net.bounds, grid_cell)
    pos = net.positions[net.station_nodes]
    origin = estimate_field(pos, events.departures, spec.bandwidth, grid)
    dest = estimate_field(pos, events.arrivals, spec.bandwidth, grid)
    boundary = build_boundary_processes(events, net, mean_speed)
    entry_points = [net.positions[n].tolist() for n in boundary.entry_nodes]
    return DemandModel(list(net.station_ids), float(sigma), spec.bandwidth, BIN_SECONDS,
                       origin, dest, boundary, entry_points)


def _b64(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr)
    if a.dtype.kind == "f":
        a = a.astype("<f8")
    return base64.b64encode(a.tobytes()).decode("ascii")


def _unb64(text: str, dtype) -> np.ndarray:
    dt = np.dtype(dtype)
    if dt.kind == "f":
        dt = np.dtype("<f8")
    return np.frombuffer(base64.b64decode(text), dtype=dt).copy()
