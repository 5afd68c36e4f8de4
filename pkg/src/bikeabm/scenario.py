"""Scenario directories and the synthetic test district.

A scenario directory holds ``network.geojson``, ``demand.json``,
``config.json`` and optionally ``standard_day.csv``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .demand import DemandError, DemandModel, build_demand
from .ingest import BINS_PER_DAY, IngestError, StandardDay, read_standard_day, write_standard_day
from .network import (NetworkError, Station, StreetNetwork, load_network, network_from_geojson,
                      network_to_geojson)
from .simcore import ConfigError, SimConfig, initial_occupancy

NETWORK_FILE = "network.geojson"
DEMAND_FILE = "demand.json"
CONFIG_FILE = "config.json"
STANDARD_DAY_FILE = "standard_day.csv"

CONFIG_KEYS = ("tau_s", "mean_speed_kmh", "walk_speed_kmh", "p_it", "p_info",
               "walk_radius_m", "sigma", "seed")


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    root: Path | None
    net: StreetNetwork
    config: SimConfig
    demand: DemandModel | None = None
    standard_day: StandardDay | None = None
    initial_bikes_override: dict[str, int] | None = None
    grid_cell_m: float = 50.0

    def initial_bikes(self) -> np.ndarray:
        if self.initial_bikes_override is not None:
            return np.array([int(self.initial_bikes_override[sid]) for sid in self.net.station_ids],
                            dtype=np.int64)
        if self.standard_day is None:
            raise ScenarioError("scenario has neither initial_bikes nor a standard day")
        lf = self.standard_day.reindex(self.net.station_ids)
        return initial_occupancy(lf[:, 0], self.net.capacities)

    def real_lf(self) -> np.ndarray | None:
        if self.standard_day is None:
            return None
        return self.standard_day.reindex(self.net.station_ids)

    def fit_demand(self, sigma: float, standard_day: StandardDay | None = None) -> DemandModel:
        std = standard_day or self.standard_day
        if std is None:
            raise ScenarioError("fitting demand needs a standard day")
        return build_demand(std, self.net, sigma, grid_cell=self.grid_cell_m,
                            mean_speed=self.config.mean_speed)

    def content_hash(self) -> str:
        """Hash over the scenario files (or their in-memory serialization)."""
        h = hashlib.sha256()
        if self.root is not None:
            for name in (NETWORK_FILE, DEMAND_FILE, CONFIG_FILE, STANDARD_DAY_FILE):
                p = self.root / name
                if p.exists():
                    h.update(name.encode())
                    h.update(p.read_bytes())
        else:
            h.update(json.dumps(network_to_geojson(self.net), sort_keys=True).encode())
            h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
            if self.demand is not None:
                h.update(json.dumps(self.demand.to_json(), sort_keys=True).encode())
        return h.hexdigest()


def config_from_json(doc: dict) -> SimConfig:
    known = {f.name for f in fields(SimConfig)}
    return SimConfig(**{k: v for k, v in doc.items() if k in known})


def load_scenario(root: str | Path, *, require_demand: bool = True) -> Scenario:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"scenario directory not found: {root}")
    net_path = root / NETWORK_FILE
    if not net_path.exists():
        raise FileNotFoundError(f"missing network file: {net_path}")
    net = load_network(net_path)
    cfg_path = root / CONFIG_FILE
    cfg_doc = {}
    if cfg_path.exists():
        with open(cfg_path) as fh:
            cfg_doc = json.load(fh)
    config = config_from_json(cfg_doc)
    demand = None
    dem_path = root / DEMAND_FILE
    if dem_path.exists():
        demand = DemandModel.load(dem_path)
    elif require_demand:
        raise FileNotFoundError(f"missing demand model: {dem_path}")
    std = None
    std_path = root / STANDARD_DAY_FILE
    if std_path.exists():
        std = read_standard_day(std_path)
    init = cfg_doc.get("initial_bikes")
    return Scenario(root, net, config, demand, std,
                    {str(k): int(v) for k, v in init.items()} if init else None,
                    float(cfg_doc.get("grid_cell_m", 50.0)))


def save_scenario(sc: Scenario, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / NETWORK_FILE, "w") as fh:
        json.dump(network_to_geojson(sc.net), fh, sort_keys=True)
    cfg = asdict(sc.config)
    cfg.pop("day_hours", None)
    cfg["grid_cell_m"] = sc.grid_cell_m
    if sc.initial_bikes_override is not None:
        cfg["initial_bikes"] = sc.initial_bikes_override
    with open(root / CONFIG_FILE, "w") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
    if sc.demand is not None:
        sc.demand.save(root / DEMAND_FILE)
    if sc.standard_day is not None:
        write_standard_day(sc.standard_day, root / STANDARD_DAY_FILE)
    sc.root = root
    return root


# ----------------------------------------------------------------------
# validation


def validate(sc: Scenario) -> list[str]:
    findings = list(sc.net.findings())
    ids = list(sc.net.station_ids)
    id_set = set(ids)
    if sc.demand is not None:
        dem = set(sc.demand.station_ids)
        for sid in ids:
            if sid not in dem:
                findings.append(f"demand model lacks station {sid}")
        for sid in sorted(dem - id_set):
            findings.append(f"demand model references unknown station {sid}")
        if sorted(sc.demand.boundary.entry_nodes) != sorted(sc.net.boundary_points):
            findings.append("demand entry points differ from network boundary points")
        ticks = sc.demand.bin_seconds / sc.config.tau_s
        if abs(ticks - round(ticks)) > 1e-9:
            findings.append(f"tau_s={sc.config.tau_s} does not divide bin width {sc.demand.bin_seconds}")
        for name, fld in (("origin", sc.demand.origin), ("destination", sc.demand.destination)):
            sums = fld.values.sum(axis=1)
            if (not np.isfinite(fld.values).all() or (fld.values < 0).any()
                    or np.abs(sums - 1).max(initial=0) > 1e-9):
                findings.append(f"{name} field is not a per-bin probability distribution")
        b = sc.demand.boundary
        if (b.entry_trials < 0).any() or (b.departure_trials < 0).any():
            findings.append("boundary process has negative trial counts")
    if sc.standard_day is not None:
        std_ids = set(sc.standard_day.station_ids)
        for sid in ids:
            if sid not in std_ids:
                findings.append(f"standard day lacks station {sid}")
        for sid in sorted(std_ids - id_set):
            findings.append(f"standard day references unknown station {sid}")
    if sc.initial_bikes_override is not None:
        caps = {s.id: s.capacity for s in sc.net.stations}
        for sid in ids:
            if sid not in sc.initial_bikes_override:
                findings.append(f"initial_bikes lacks station {sid}")
            elif not 0 <= sc.initial_bikes_override[sid] <= max(caps[sid], 0):
                findings.append(f"initial_bikes for station {sid} outside [0, capacity]")
    elif sc.standard_day is None:
        findings.append("no initial state: supply standard_day.csv or initial_bikes")
    return findings


def validate_path(root: str | Path) -> list[str]:
    """Findings for a scenario directory; unreadable parts become findings too."""
    try:
        sc = load_scenario(root, require_demand=False)
    except FileNotFoundError:
        raise
    except (NetworkError, DemandError, IngestError, ConfigError, ScenarioError,
            json.JSONDecodeError, KeyError, TypeError) as exc:
        return [f"{type(exc).__name__}: {exc}"]
    findings = validate(sc)
    if sc.demand is None:
        findings.append(f"missing demand model {Path(root) / DEMAND_FILE}")
    return findings


# ----------------------------------------------------------------------
# synthetic district


@dataclass
class SyntheticSpec:
    grid_size: int = 12
    side_m: float = 2000.0
    n_stations: int = 40
    asymmetry: float = 1.0
    seed: int = 0
    entries_per_side: int = 2
    grid_cell_m: float = 100.0
    sigma: float = 50.0
    p_info: float = 0.3
    walk_radius_m: float = 400.0


def _grid_network(spec: SyntheticSpec, rng: np.random.Generator) -> StreetNetwork:
    g = spec.grid_size
    step = spec.side_m / (g - 1)
    pos = np.array([(i * step, j * step) for j in range(g) for i in range(g)], dtype=float)

    def node(i, j):
        return j * g + i

    edges = []
    for j in range(g):
        for i in range(g):
            if i + 1 < g:
                edges.append((node(i, j), node(i + 1, j), step))
            if j + 1 < g:
                edges.append((node(i, j), node(i, j + 1), step))
    k = spec.entries_per_side
    along = [int(round((m + 1) * (g - 1) / (k + 1))) for m in range(k)]
    entries = set()
    for a in along:
        entries.update({node(a, 0), node(a, g - 1), node(0, a), node(g - 1, a)})
    if spec.n_stations > g * g:
        raise ScenarioError("more stations than network nodes")
    candidates = [n for n in range(g * g) if n not in entries]
    if spec.n_stations > len(candidates):
        candidates = list(range(g * g))
    chosen = sorted(rng.choice(candidates, size=spec.n_stations, replace=False).tolist())
    caps = rng.integers(15, 31, size=len(chosen)).tolist()
    stations = [Station(str(m + 1), n, c) for m, (n, c) in enumerate(zip(chosen, caps))]
    bounds = np.array([[0, 0], [spec.side_m, 0], [spec.side_m, spec.side_m], [0, spec.side_m]], dtype=float)
    return StreetNetwork(pos, edges, stations, sorted(entries), bounds)


def _ramp(hours: np.ndarray, start: float, end: float) -> np.ndarray:
    return np.clip((hours - start) / (end - start), 0.0, 1.0)


def synthetic_standard_day(net: StreetNetwork, asymmetry: float, rng: np.random.Generator) -> StandardDay:
    """Residential west empties in the morning and refills in the evening; east mirrors it."""
    hours = 3.0 + np.arange(BINS_PER_DAY) * 5 / 60
    half = net.diameter / np.sqrt(2) / 2
    caps = net.capacities
    lf = np.empty((len(caps), BINS_PER_DAY))
    for k, s in enumerate(net.stations):
        west = net.positions[s.node][0] < half
        amp = asymmetry * rng.uniform(0.3, 0.5)
        shift = rng.uniform(-0.5, 0.5)
        wobble = asymmetry * 0.04 * np.sin(2 * np.pi * (hours - rng.uniform(0, 6)) / 3.0)
        swing = _ramp(hours, 7.0 + shift, 9.5 + shift) - _ramp(hours, 17.0 + shift, 19.5 + shift)
        midday = (hours > 10.5) & (hours < 16.5)
        if west:
            level = 0.5 + amp - 2 * amp * swing
        else:
            level = 0.5 - amp + 2 * amp * swing
        level = level + np.where(midday, wobble, 0.0)
        bikes = np.clip(np.floor(level * caps[k] + 0.5), 0, caps[k])
        lf[k] = bikes / caps[k]
    return StandardDay(list(net.station_ids), lf, [], 0)


def generate_synthetic(spec: SyntheticSpec) -> Scenario:
    rng = np.random.default_rng(spec.seed)
    # the file round trip fixes the canonical node numbering used by demand.json
    net = network_from_geojson(network_to_geojson(_grid_network(spec, rng)))
    std = synthetic_standard_day(net, spec.asymmetry, rng)
    config = SimConfig(p_info=spec.p_info, walk_radius_m=spec.walk_radius_m, sigma=spec.sigma,
                       seed=spec.seed)
    sc = Scenario(None, net, config, None, std, None, spec.grid_cell_m)
    sc.demand = sc.fit_demand(spec.sigma)
    return sc


def write_synthetic(out: str | Path, spec: SyntheticSpec) -> Path:
    return save_scenario(generate_synthetic(spec), out)
