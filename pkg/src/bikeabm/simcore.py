"""Day-long, seeded simulation of bikers and docking stations.

Each tick runs three phases in order: start new travels, move every active
agent, then finish or redirect the agents that reached the end of their
path.  Agents travel along shortest network paths; only the remaining path
length is tracked, the node sequence is recovered on demand.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .demand import DemandModel
from .network import StreetNetwork

log = logging.getLogger(__name__)

RIDE = "ride"
WALK = "walk"
QUEUED = "queued"

ENTRY = 0
DEPARTURE = 1

MAX_WALKS = 2


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    tau_s: float = 60.0
    mean_speed_kmh: float = 14.0
    walk_speed_kmh: float = 5.0
    p_it: float = 0.20
    p_info: float = 0.30
    walk_radius_m: float = 400.0
    sigma: float = 50.0
    seed: int = 0
    day_hours: float = 24.0

    def __post_init__(self):
        for name in ("p_it", "p_info"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not self.tau_s > 0:
            raise ConfigError("tau_s must be positive")
        if not (self.mean_speed_kmh > 0 and self.walk_speed_kmh > 0):
            raise ConfigError("speeds must be positive")
        if self.walk_radius_m < 0:
            raise ConfigError("walk_radius_m must be non-negative")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")

    @property
    def mean_speed(self) -> float:
        return self.mean_speed_kmh / 3.6

    @property
    def walk_speed(self) -> float:
        return self.walk_speed_kmh / 3.6

    @property
    def n_ticks(self) -> int:
        return int(round(self.day_hours * 3600 / self.tau_s))

    def replace(self, **changes) -> "SimConfig":
        d = asdict(self)
        d.update({k: v for k, v in changes.items() if v is not None})
        return SimConfig(**d)


@dataclass(slots=True)
class Biker:
    id: int
    informed: bool
    outbound: bool
    walk_radius: float
    mode: str = RIDE
    origin: int = -1
    target: int = -1
    raw_target: int = -1
    path_from: int = -1
    path_len: float = 0.0
    traveled: float = 0.0
    visited: set = field(default_factory=set)
    d_th: float = 0.0
    d_r: float = 0.0
    adverse: bool = False
    walks: int = 0
    start_tick: int = 0
    ridden: bool = False

    def position(self, net: StreetNetwork) -> tuple[int, int, float]:
        """(edge start node, edge end node, meters past the start node)."""
        path = net.shortest_path(self.path_from, self.target)
        if len(path.nodes) == 1:
            return path.nodes[0], path.nodes[0], 0.0
        left = self.traveled
        for u, v in zip(path.nodes[:-1], path.nodes[1:]):
            length = dict(net.adjacency[u])[v]
            if left < length:
                return u, v, left
            left -= length
        u, v = path.nodes[-2], path.nodes[-1]
        return u, v, dict(net.adjacency[u])[v]


@dataclass
class TravelRecord:
    biker: int
    d_th: float
    d_r: float
    adverse: bool
    completed: bool
    outcome: str  # dropped | exited | abandoned | unfinished
    informed: bool
    outbound: bool
    start_tick: int
    end_tick: int
    ridden: bool


@dataclass
class RunResult:
    seed: int
    occupancy: np.ndarray  # (T+1, S): state at times 0, tau, ..., T*tau
    in_transit: np.ndarray  # (T+1,)
    entered: np.ndarray  # cumulative, (T+1,)
    exited: np.ndarray  # cumulative, (T+1,)
    records: list[TravelRecord]
    events: list[dict] | None
    meta: dict


class Simulation:
    def __init__(self, net: StreetNetwork, demand: DemandModel, config: SimConfig,
                 initial_bikes, seed: int | None = None, *, record_events: bool = False,
                 check: bool = False):
        if list(demand.station_ids) != list(net.station_ids):
            raise ConfigError("demand model stations differ from network stations")
        ticks_per_bin = demand.bin_seconds / config.tau_s
        if abs(ticks_per_bin - round(ticks_per_bin)) > 1e-9:
            raise ConfigError(f"tick {config.tau_s}s does not divide the {demand.bin_seconds}s demand bin")
        self.net = net
        self.demand = demand
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.rng = np.random.default_rng(self.seed)
        self.ticks_per_bin = int(round(ticks_per_bin))
        self.cap = net.capacities.copy()
        self.occ = np.asarray(initial_bikes, dtype=np.int64).copy()
        if self.occ.shape != self.cap.shape:
            raise ConfigError("initial occupancy does not match station count")
        if (self.occ < 0).any() or (self.occ > self.cap).any():
            raise ConfigError("initial occupancy outside [0, capacity]")
        self.initial_total = int(self.occ.sum())
        self.dist = net.distances
        self.node_station = net.node_station_distances
        self.station_node = net.station_nodes.tolist()
        self.station_at_node = net.station_at_node
        self.positions = net.positions
        self.entries = list(demand.boundary.entry_nodes)
        self.entry_set = set(self.entries)
        self.nearest_any = np.argmin(self.node_station, axis=1).tolist()
        self.ride_step = config.tau_s * config.mean_speed
        self.walk_step = config.tau_s * config.walk_speed

        self._within_cache: dict[tuple[int, float], list[int]] = {}
        self.active: dict[int, Biker] = {}
        self.queue: list[Biker] = []
        self.schedule: dict[int, list[tuple]] = {}
        self.records: list[TravelRecord] = []
        self.events: list[dict] | None = [] if record_events else None
        self.check = check
        self.next_id = 0
        self.riding = 0
        self.entered = 0
        self.exited = 0
        self.tick = 0
        self.stats = {"abandoned": 0, "radius_doubled": 0, "global_fallback": 0, "waits": 0}
        self._draw_day()

    # ------------------------------------------------------------------

    def _log(self, kind: str, biker: int, **fields) -> None:
        if self.events is not None:
            ev = {"tick": self.tick, "event": kind, "biker": biker}
            ev.update(fields)
            self.events.append(ev)

    def _sid(self, k: int | None):
        return None if k is None else self.net.stations[k].id

    def _station_of(self, node: int) -> int | None:
        return self.station_at_node.get(node)

    def _set_route(self, b: Biker, start: int, target: int) -> None:
        b.path_from = start
        b.target = target
        b.path_len = float(self.dist[start, target])
        b.traveled = 0.0

    def _nearest(self, node: int, mask: np.ndarray) -> int | None:
        row = np.where(mask, self.node_station[node], np.inf)
        k = int(np.argmin(row))
        return None if math.isinf(row[k]) else k

    def _random_within(self, node: int, radius: float, exclude: set) -> int | None:
        key = (node, radius)
        hits = self._within_cache.get(key)
        if hits is None:
            hits = np.flatnonzero(self.node_station[node] <= radius).tolist()
            self._within_cache[key] = hits
        cands = [k for k in hits if k not in exclude]
        if not cands:
            return None
        return cands[int(self.rng.integers(len(cands)))]

    def _free_mask(self) -> np.ndarray:
        return self.occ < self.cap

    def _assert_state(self, phase: str) -> None:
        if (self.occ < 0).any() or (self.occ > self.cap).any():
            raise AssertionError(f"tick {self.tick} {phase}: occupancy out of bounds")
        lhs = int(self.occ.sum()) + self.riding
        rhs = self.initial_total + self.entered - self.exited
        if lhs != rhs:
            raise AssertionError(f"tick {self.tick} {phase}: conservation {lhs} != {rhs}")

    # ------------------------------------------------------------------
    # phase 1

    def _snap(self, points: np.ndarray) -> list[int]:
        """Nearest node per point (euclidean); ties go to the smallest node id."""
        if len(points) == 0:
            return []
        d2 = ((points[:, None, :] - self.positions[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1).tolist()

    def _draw_day(self) -> None:
        """Draw every travel initiation of the day and place each on a tick of its bin.

        The draws do not depend on the system state, so they are made up front
        in one vectorized pass; decisions that do depend on state (retargeting,
        empty origins) still happen at the scheduled tick.
        """
        cfg, rng, dem = self.config, self.rng, self.demand
        n_bins = min(dem.n_bins, -(-self.config.n_ticks // self.ticks_per_bin))
        bd = dem.boundary
        ent_counts = rng.binomial(bd.entry_trials[:, :n_bins], bd.entry_prob)  # (I, B)
        if bd.departure_prob >= 1.0:
            dep_counts = bd.departure_trials[:n_bins].astype(np.int64)
        else:
            dep_counts = rng.binomial(bd.departure_trials[:n_bins], bd.departure_prob)
        # entries ordered by bin, then entry point
        ent_bin = np.repeat(np.tile(np.arange(n_bins), len(self.entries)), ent_counts.ravel())
        ent_point = np.repeat(np.repeat(np.arange(len(self.entries)), n_bins), ent_counts.ravel())
        order = np.lexsort((ent_point, ent_bin))
        ent_bin, ent_point = ent_bin[order], ent_point[order]
        dep_bin = np.repeat(np.arange(n_bins), dep_counts)
        n_ent, n_dep = len(ent_bin), len(dep_bin)

        ent_informed = (rng.random(n_ent) < cfg.p_info).tolist()
        ent_dest = self._snap(dem.destination.sample_points_in_bins(ent_bin, rng))
        dep_origin = self._snap(dem.origin.sample_points_in_bins(dep_bin, rng))
        dep_informed = (rng.random(n_dep) < cfg.p_info).tolist()
        internal = rng.random(n_dep) < cfg.p_it
        inner_dest = self._snap(dem.destination.sample_points_in_bins(dep_bin[internal], rng))
        outer_dest = rng.integers(len(self.entries), size=n_dep - len(inner_dest)).tolist()
        ent_tick = (ent_bin * self.ticks_per_bin + rng.integers(0, self.ticks_per_bin, size=n_ent)).tolist()
        dep_tick = (dep_bin * self.ticks_per_bin + rng.integers(0, self.ticks_per_bin, size=n_dep)).tolist()

        todo = []
        for t, i, inf, dest in zip(ent_tick, ent_point.tolist(), ent_informed, ent_dest):
            todo.append((t, 0, (ENTRY, self.entries[i], dest, inf)))
        inner, outer = iter(inner_dest), iter(outer_dest)
        for t, origin, inf, is_in in zip(dep_tick, dep_origin, dep_informed, internal.tolist()):
            dest = next(inner) if is_in else self.entries[next(outer)]
            todo.append((t, 1, (DEPARTURE, origin, dest, inf, is_in)))
        # stable: within a tick, entries come before departures, each in draw order
        todo.sort(key=lambda x: (x[0], x[1]))
        for t, _, ev in todo:
            self.schedule.setdefault(t, []).append(ev)

    def _new_biker(self, informed: bool, outbound: bool) -> Biker:
        b = Biker(self.next_id, informed, outbound, self.config.walk_radius_m, start_tick=self.tick)
        self.next_id += 1
        return b

    def _retarget(self, b: Biker) -> None:
        """Informed riders aim at the free dock closest to their destination."""
        target = b.raw_target
        if b.informed and not b.outbound:
            k = self._nearest(b.raw_target, self._free_mask())
            if k is not None:
                target = self.station_node[k]
        b.target = target

    def _enter(self, node: int, dest: int, informed: bool) -> None:
        b = self._new_biker(informed, outbound=False)
        b.raw_target = dest
        b.origin = node
        self._retarget(b)
        self.entered += 1
        self.riding += 1
        self._log("enter", b.id, node=node)
        self._begin_ride(b, node)

    def _depart(self, origin_node: int, dest: int, informed: bool, internal: bool) -> None:
        k0 = int(self.nearest_any[origin_node])
        b = self._new_biker(informed, outbound=not internal)
        b.raw_target = dest
        b.origin = self.station_node[k0]
        self._log("depart", b.id, station=self._sid(k0))
        self._try_start(b, k0)

    def _try_start(self, b: Biker, k: int) -> None:
        b.visited.add(k)
        if self.occ[k] > 0:
            self.occ[k] -= 1
            self.riding += 1
            self._retarget(b)
            self._begin_ride(b, self.station_node[k])
            return
        b.adverse = True
        if b.walks >= MAX_WALKS:
            self._abandon(b, k)
            return
        node = self.station_node[k]
        if b.informed:
            nxt = self._nearest(node, self.occ > 0)
        else:
            nxt = self._random_within(node, b.walk_radius, b.visited)
        if nxt is None:
            self._abandon(b, k)
            return
        b.walks += 1
        b.mode = WALK
        self._set_route(b, node, self.station_node[nxt])
        self.active[b.id] = b
        self._log("empty", b.id, station=self._sid(k), walk_to=self._sid(nxt))

    def _begin_ride(self, b: Biker, node: int) -> None:
        b.mode = RIDE
        b.ridden = True
        b.origin = node
        target = b.target
        self._set_route(b, node, target)
        b.d_th = b.path_len
        self.active[b.id] = b
        self._log("start", b.id, node=node, target=target,
                  station=self._sid(self._station_of(target)), d_th=b.d_th)

    def _abandon(self, b: Biker, k: int) -> None:
        self.stats["abandoned"] += 1
        self.active.pop(b.id, None)
        self._record(b, "abandoned", completed=False)
        self._log("abandon", b.id, station=self._sid(k))

    def start_travels(self) -> None:
        for ev in self.schedule.pop(self.tick, ()):
            if ev[0] == ENTRY:
                self._enter(*ev[1:])
            else:
                self._depart(*ev[1:])
        if self.queue:
            waiting, self.queue = sorted(self.queue, key=lambda b: b.id), []
            for b in waiting:
                self._try_start(b, self.station_at_node[b.target])

    # ------------------------------------------------------------------
    # phase 2

    def move(self) -> list[Biker]:
        arrived = []
        ride_step, walk_step = self.ride_step, self.walk_step
        for b in self.active.values():
            riding = b.mode == RIDE
            step = ride_step if riding else walk_step
            left = b.path_len - b.traveled
            if step >= left:
                adv = left
                b.traveled = b.path_len
                arrived.append(b)
            else:
                adv = step
                b.traveled += step
            if riding:
                b.d_r += adv
        return arrived

    # ------------------------------------------------------------------
    # phase 3

    def _fallback_target(self, b: Biker, node: int) -> int | None:
        """Station for a rider who must dock: radius, doubled radius, then nearest free dock."""
        k = self._random_within(node, b.walk_radius, b.visited)
        if k is None:
            self.stats["radius_doubled"] += 1
            k = self._random_within(node, 2 * b.walk_radius, b.visited)
        if k is None:
            self.stats["global_fallback"] += 1
            k = self._nearest(node, self._free_mask())
        return k

    def _reroute(self, b: Biker, node: int, kind: str, at_station: int | None) -> None:
        if b.informed:
            k = self._nearest(node, self._free_mask())
        else:
            k = self._fallback_target(b, node)
        if k is None:
            # no free dock anywhere: hold position and retry next tick
            self.stats["waits"] += 1
            self._set_route(b, node, node)
            self._log("wait", b.id, node=node)
            return
        self._set_route(b, node, self.station_node[k])
        self._log(kind, b.id, station=self._sid(at_station), to=self._sid(k))

    def finish_or_redirect(self, arrived: list[Biker]) -> None:
        for b in sorted(arrived, key=lambda x: x.id):
            node = b.target
            if b.mode == WALK:
                b.mode = QUEUED
                del self.active[b.id]
                self.queue.append(b)
                continue
            if b.outbound:
                if node in self.entry_set and node == b.raw_target:
                    del self.active[b.id]
                    self.riding -= 1
                    self.exited += 1
                    self._record(b, "exited", completed=True)
                    self._log("exit", b.id, node=node, d_r=b.d_r)
                    continue
            k = self._station_of(node)
            if k is None:
                self._reroute(b, node, "redirect", None)
                continue
            if self.occ[k] < self.cap[k]:
                self.occ[k] += 1
                self.riding -= 1
                del self.active[b.id]
                self._record(b, "dropped", completed=True)
                self._log("drop", b.id, station=self._sid(k), d_r=b.d_r)
                continue
            b.adverse = True
            b.visited.add(k)
            self._reroute(b, node, "full", k)

    # ------------------------------------------------------------------

    def _record(self, b: Biker, outcome: str, completed: bool) -> None:
        self.records.append(TravelRecord(
            b.id, b.d_th, b.d_r, b.adverse, completed, outcome, b.informed, b.outbound,
            b.start_tick, self.tick, b.ridden,
        ))

    def step(self) -> None:
        self.start_travels()
        if self.check:
            self._assert_state("start")
        arrived = self.move()
        self.finish_or_redirect(arrived)
        if self.check:
            self._assert_state("finish")
        self.tick += 1

    def run(self) -> RunResult:
        n = self.config.n_ticks
        S = len(self.cap)
        occupancy = np.empty((n + 1, S), dtype=np.int64)
        in_transit = np.empty(n + 1, dtype=np.int64)
        entered = np.empty(n + 1, dtype=np.int64)
        exited = np.empty(n + 1, dtype=np.int64)
        occupancy[0] = self.occ
        in_transit[0] = entered[0] = exited[0] = 0
        for t in range(n):
            self.step()
            occupancy[t + 1] = self.occ
            in_transit[t + 1] = self.riding
            entered[t + 1] = self.entered
            exited[t + 1] = self.exited
        for b in sorted(list(self.active.values()) + self.queue, key=lambda x: x.id):
            self._record(b, "unfinished", completed=False)
        meta = {
            "seed": self.seed,
            "config": asdict(self.config),
            "distance": "network",
            "travels": len(self.records),
            "demand_clamped": self.demand.boundary.clamped,
            **self.stats,
        }
        return RunResult(self.seed, occupancy, in_transit, entered, exited, self.records,
                         self.events, meta)


def initial_occupancy(lf_bin0, capacities) -> np.ndarray:
    caps = np.asarray(capacities, dtype=np.int64)
    bikes = np.floor(np.asarray(lf_bin0, dtype=float) * caps + 0.5).astype(np.int64)
    return np.clip(bikes, 0, caps)


def simulate(net: StreetNetwork, demand: DemandModel, config: SimConfig, initial_bikes,
             seed: int | None = None, **kw) -> RunResult:
    return Simulation(net, demand, config, initial_bikes, seed, **kw).run()
