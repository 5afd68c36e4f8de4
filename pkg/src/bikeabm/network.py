"""Euclidean street graph with docking stations and boundary entry points.

Node ids are dense integers assigned in order of first appearance when the
network is loaded.  Station ids are strings; they sort numerically when every
id is an integer literal, otherwise lexicographically.  All distances are
network (shortest-path) distances in meters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

EDGE_TOLERANCE_M = 1e-6
SNAP_TOLERANCE_M = 1.0
BOUNDARY_TOLERANCE_M = 1.0


class NetworkError(ValueError):
    """Raised for structurally invalid network input."""


class UnreachableNode(NetworkError):
    pass


def station_sort_key(station_id: str) -> tuple:
    try:
        return (0, int(station_id), "")
    except ValueError:
        return (1, 0, station_id)


@dataclass(frozen=True)
class Station:
    id: str
    node: int
    capacity: int


@dataclass(frozen=True)
class Path:
    nodes: tuple[int, ...]
    length: float


@dataclass
class StreetNetwork:
    positions: np.ndarray  # (N, 2) planar meters
    edges: list[tuple[int, int, float]]
    stations: list[Station]
    boundary_points: list[int]
    bounds: np.ndarray  # (K, 2) closed ring, first vertex not repeated
    _path_cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float)
        self.bounds = np.asarray(self.bounds, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise NetworkError("positions must be an (N, 2) array")
        if not np.all(np.isfinite(self.positions)):
            raise NetworkError("node positions must be finite")
        n = len(self.positions)
        for u, v, length in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise NetworkError(f"edge ({u}, {v}) references unknown node")
            if u == v:
                raise NetworkError(f"self-loop on node {u}")
            if not length > 0:
                raise NetworkError(f"edge ({u}, {v}) has non-positive length {length}")
            euclid = float(np.hypot(*(self.positions[u] - self.positions[v])))
            if length < euclid - EDGE_TOLERANCE_M:
                raise NetworkError(
                    f"edge ({u}, {v}) length {length} shorter than straight line {euclid:.6f}"
                )
        self.stations = sorted(self.stations, key=lambda s: station_sort_key(s.id))
        ids = [s.id for s in self.stations]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate station ids")
        self.boundary_points = list(self.boundary_points)
        adjacency: list[dict[int, float]] = [{} for _ in range(n)]
        for u, v, length in self.edges:
            # parallel edges collapse to the shortest one
            if length < adjacency[u].get(v, math.inf):
                adjacency[u][v] = length
                adjacency[v][u] = length
        self.adjacency = [sorted(nbrs.items()) for nbrs in adjacency]
        self.station_index = {s.id: k for k, s in enumerate(self.stations)}
        self.station_at_node: dict[int, int] = {}
        for k, s in enumerate(self.stations):
            if not 0 <= s.node < n:
                raise NetworkError(f"station {s.id} references unknown node {s.node}")
            if s.node in self.station_at_node:
                raise NetworkError(f"two stations share node {s.node}")
            self.station_at_node[s.node] = k

    # ------------------------------------------------------------------
    # sizes and static arrays

    @property
    def node_count(self) -> int:
        return len(self.positions)

    @cached_property
    def station_nodes(self) -> np.ndarray:
        return np.array([s.node for s in self.stations], dtype=np.int64)

    @cached_property
    def capacities(self) -> np.ndarray:
        return np.array([s.capacity for s in self.stations], dtype=np.int64)

    @cached_property
    def station_ids(self) -> list[str]:
        return [s.id for s in self.stations]

    @cached_property
    def diameter(self) -> float:
        """Largest distance between two vertices of the district polygon."""
        pts = self.bounds if len(self.bounds) else self.positions
        diff = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((diff**2).sum(-1)).max())

    # ------------------------------------------------------------------
    # routing

    @cached_property
    def distances(self) -> np.ndarray:
        """All-pairs network distances, (N, N); inf where unreachable."""
        n = self.node_count
        rows, cols, data = [], [], []
        for u, nbrs in enumerate(self.adjacency):
            for v, length in nbrs:
                rows.append(u)
                cols.append(v)
                data.append(length)
        graph = csr_matrix((data, (rows, cols)), shape=(n, n))
        return dijkstra(graph, directed=False)

    @cached_property
    def node_station_distances(self) -> np.ndarray:
        """(N, S) distances from every node to every station."""
        return np.ascontiguousarray(self.distances[:, self.station_nodes])

    @cached_property
    def station_distances(self) -> np.ndarray:
        """(S, S) network distances between stations."""
        return np.ascontiguousarray(self.distances[np.ix_(self.station_nodes, self.station_nodes)])

    def distance(self, a: int, b: int) -> float:
        d = float(self.distances[a, b])
        if math.isinf(d):
            raise UnreachableNode(f"no path between nodes {a} and {b}")
        return d

    def shortest_path(self, a: int, b: int) -> Path:
        """Minimal-length path; ties go to the lexicographically smallest node sequence."""
        key = (a, b)
        cached = self._path_cache.get(key)
        if cached is not None:
            return cached
        n = self.node_count
        if not (0 <= a < n and 0 <= b < n):
            raise UnreachableNode(f"unknown node in ({a}, {b})")
        total = self.distance(a, b)
        to_target = self.distances[:, b]
        nodes = [a]
        cur = a
        while cur != b:
            remaining = to_target[cur]
            tol = 1e-9 * max(1.0, remaining)
            for v, length in self.adjacency[cur]:
                if abs(length + to_target[v] - remaining) <= tol:
                    cur = v
                    break
            else:  # pragma: no cover - distances are exact shortest paths
                raise UnreachableNode(f"path reconstruction failed at node {cur}")
            nodes.append(cur)
        path = Path(tuple(nodes), total)
        self._path_cache[key] = path
        return path

    # ------------------------------------------------------------------
    # spatial queries

    def nearest_node(self, point: Sequence[float]) -> int:
        """Euclidean snap; ties go to the smallest node id."""
        d2 = ((self.positions - np.asarray(point, dtype=float)) ** 2).sum(axis=1)
        return int(np.argmin(d2))

    def nearest_station_index(self, node: int, mask: np.ndarray | None = None) -> int | None:
        """Index of the closest station from `node` among those where `mask` is true."""
        row = self.node_station_distances[node]
        if mask is not None:
            row = np.where(mask, row, np.inf)
        k = int(np.argmin(row))
        if math.isinf(row[k]):
            return None
        return k

    def nearest_station(
        self, point: Sequence[float], pred: Callable[[Station], bool] | None = None
    ) -> Station | None:
        node = self.nearest_node(point)
        mask = None
        if pred is not None:
            mask = np.array([bool(pred(s)) for s in self.stations], dtype=bool)
        k = self.nearest_station_index(node, mask)
        return None if k is None else self.stations[k]

    def stations_within_index(
        self, node: int, radius: float, exclude: Iterable[int] = ()
    ) -> list[int]:
        if radius < 0:
            raise ValueError("radius must be non-negative")
        hits = np.flatnonzero(self.node_station_distances[node] <= radius)
        excluded = set(exclude)
        return [int(k) for k in hits if int(k) not in excluded]

    def stations_within(
        self, point: Sequence[float], radius: float, exclude: Iterable[str] = ()
    ) -> list[Station]:
        node = self.nearest_node(point)
        excluded = {self.station_index[sid] for sid in exclude if sid in self.station_index}
        return [self.stations[k] for k in self.stations_within_index(node, radius, excluded)]

    # ------------------------------------------------------------------
    # checks

    def findings(self) -> list[str]:
        """Invariant violations that do not prevent loading."""
        out = []
        for s in self.stations:
            if s.capacity <= 0:
                out.append(f"station {s.id}: capacity must be positive, got {s.capacity}")
        anchors = sorted(set(self.station_nodes.tolist()) | set(self.boundary_points))
        if anchors:
            sub = self.distances[np.ix_(anchors, anchors)]
            if np.isinf(sub).any():
                out.append("stations and boundary points are not all mutually reachable")
        if len(self.bounds) >= 3:
            for node in self.boundary_points:
                d = point_to_ring_distance(self.positions[node], self.bounds)
                if d > BOUNDARY_TOLERANCE_M:
                    out.append(f"boundary node {node} lies {d:.1f} m off the district perimeter")
        if not self.boundary_points:
            out.append("network has no boundary points")
        return out


def point_to_ring_distance(point: np.ndarray, ring: np.ndarray) -> float:
    a = ring
    b = np.roll(ring, -1, axis=0)
    ab = b - a
    denom = (ab**2).sum(axis=1)
    t = np.where(denom > 0, ((point - a) * ab).sum(axis=1) / np.where(denom > 0, denom, 1), 0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return float(np.sqrt(((proj - point) ** 2).sum(axis=1)).min())


def points_in_polygon(points: np.ndarray, ring: np.ndarray) -> np.ndarray:
    """Even-odd rule containment for an (M, 2) array of points."""
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    j = len(ring) - 1
    for i in range(len(ring)):
        xi, yi = ring[i]
        xj, yj = ring[j]
        crosses = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = (xj - xi) * (y - yi) / (yj - yi) + xi
        inside ^= crosses & (x < xcross)
        j = i
    return inside


# ----------------------------------------------------------------------
# GeoJSON


def _looks_geographic(coords: np.ndarray) -> bool:
    if coords.size == 0:
        return False
    x, y = coords[:, 0], coords[:, 1]
    in_range = np.all(np.abs(x) <= 180) and np.all(np.abs(y) <= 90)
    span = max(np.ptp(x), np.ptp(y))
    return bool(in_range and span <= 1.0)


def network_from_geojson(doc: dict) -> StreetNetwork:
    if doc.get("type") != "FeatureCollection":
        raise NetworkError("network must be a GeoJSON FeatureCollection")
    crs = json.dumps(doc.get("crs", "")).upper()
    if "4326" in crs or "CRS84" in crs:
        raise NetworkError("network uses lon/lat coordinates; supply pre-projected planar meters")

    node_ids: dict[tuple[float, float], int] = {}
    positions: list[tuple[float, float]] = []

    def node_for(xy) -> int:
        key = (round(float(xy[0]), 6), round(float(xy[1]), 6))
        if key not in node_ids:
            node_ids[key] = len(positions)
            positions.append(key)
        return node_ids[key]

    edges: list[tuple[int, int, float]] = []
    points: list[tuple[dict, tuple[float, float]]] = []
    bounds = None
    all_coords = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        gtype = geom.get("type")
        coords = geom.get("coordinates")
        if gtype == "LineString":
            pts = np.asarray(coords, dtype=float)[:, :2]
            all_coords.append(pts)
            seg = np.hypot(*np.diff(pts, axis=0).T)
            scale = 1.0
            if "length_m" in props and seg.sum() > 0:
                scale = float(props["length_m"]) / float(seg.sum())
            ids = [node_for(p) for p in pts]
            for (u, v), length in zip(zip(ids[:-1], ids[1:]), seg):
                if u != v:
                    edges.append((u, v, float(length) * scale))
        elif gtype == "Point":
            xy = (float(coords[0]), float(coords[1]))
            all_coords.append(np.asarray([xy]))
            points.append((props, xy))
        elif gtype == "Polygon" and props.get("kind") == "bounds":
            ring = np.asarray(coords[0], dtype=float)[:, :2]
            if len(ring) > 1 and np.allclose(ring[0], ring[-1]):
                ring = ring[:-1]
            bounds = ring
            all_coords.append(ring)
    if all_coords and _looks_geographic(np.concatenate(all_coords)):
        raise NetworkError("network coordinates look like lon/lat degrees; supply planar meters")
    if not positions:
        raise NetworkError("network has no LineString edges")
    # canonical numbering (by x, then y) so node ids do not depend on feature order
    raw = np.asarray(positions, dtype=float)
    order = np.lexsort((raw[:, 1], raw[:, 0]))
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    pos = raw[order]
    edges = [(int(rank[u]), int(rank[v]), length) for u, v, length in edges]

    def snap(xy, what) -> int:
        d = np.hypot(*(pos - np.asarray(xy)).T)
        k = int(np.argmin(d))
        if d[k] > SNAP_TOLERANCE_M:
            raise NetworkError(f"{what} at {xy} is {d[k]:.2f} m from the nearest network vertex")
        return k

    stations = []
    boundary = []
    for props, xy in points:
        kind = props.get("kind")
        if kind == "station":
            if "station_id" not in props or "capacity" not in props:
                raise NetworkError(f"station point at {xy} needs station_id and capacity")
            sid = str(props["station_id"])
            stations.append(Station(sid, snap(xy, f"station {sid}"), int(props["capacity"])))
        elif kind == "boundary":
            boundary.append(snap(xy, "boundary point"))
    if bounds is None:
        lo, hi = pos.min(axis=0), pos.max(axis=0)
        bounds = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    return StreetNetwork(pos, edges, stations, sorted(set(boundary)), bounds)


def load_network(path: str | Path) -> StreetNetwork:
    with open(path) as fh:
        return network_from_geojson(json.load(fh))


def network_to_geojson(net: StreetNetwork) -> dict:
    feats = []
    for u, v, length in net.edges:
        feats.append({
            "type": "Feature",
            "properties": {"length_m": length},
            "geometry": {"type": "LineString",
                         "coordinates": [net.positions[u].tolist(), net.positions[v].tolist()]},
        })
    for s in net.stations:
        feats.append({
            "type": "Feature",
            "properties": {"kind": "station", "station_id": s.id, "capacity": s.capacity},
            "geometry": {"type": "Point", "coordinates": net.positions[s.node].tolist()},
        })
    for node in net.boundary_points:
        feats.append({
            "type": "Feature",
            "properties": {"kind": "boundary"},
            "geometry": {"type": "Point", "coordinates": net.positions[node].tolist()},
        })
    ring = net.bounds.tolist()
    feats.append({
        "type": "Feature",
        "properties": {"kind": "bounds"},
        "geometry": {"type": "Polygon", "coordinates": [ring + [ring[0]]]},
    })
    return {"type": "FeatureCollection", "features": feats}
