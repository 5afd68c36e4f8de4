import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bikeabm.network import (NetworkError, Station, StreetNetwork, UnreachableNode, load_network,
                             network_from_geojson, network_to_geojson, points_in_polygon)

from conftest import grid_network, line_network


def all_simple_paths(net, a, b):
    out = []

    def walk(path, length):
        cur = path[-1]
        if cur == b:
            out.append((length, tuple(path)))
            return
        for v, l in net.adjacency[cur]:
            if v not in path:
                walk(path + [v], length + l)

    walk([a], 0.0)
    return out


def test_path_to_self_is_single_node():
    net = line_network([100.0])
    p = net.shortest_path(1, 1)
    assert p.nodes == (1,) and p.length == 0


def test_two_node_path():
    net = line_network([100.0])
    assert net.shortest_path(0, 1).length == 100.0


def test_square_tie_goes_to_smaller_next_node():
    net = grid_network(2, 100.0)
    p = net.shortest_path(0, 3)
    assert p.length == 200.0
    assert p.nodes == (0, 1, 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_shortest_path_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    pos = rng.uniform(0, 100, size=(n, 2))
    # a random spanning tree plus extra edges, integer-ish lengths to create ties
    edges = {}
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges[(u, v)] = None
    for _ in range(n):
        u, v = sorted(rng.choice(n, 2, replace=False).tolist())
        edges[(u, v)] = None
    elist = []
    for u, v in edges:
        euclid = math.hypot(*(pos[u] - pos[v]))
        elist.append((u, v, float(math.ceil(euclid / 20) * 20 + 20)))
    net = StreetNetwork(pos, elist, [], [0], np.array([[0, 0], [100, 0], [100, 100], [0, 100.0]]))
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            paths = all_simple_paths(net, a, b)
            best = min(l for l, _ in paths)
            lexi = min(p for l, p in paths if abs(l - best) <= 1e-9 * max(1, best))
            got = net.shortest_path(a, b)
            assert got.length == pytest.approx(best, abs=1e-9)
            assert got.nodes == lexi


def test_unreachable_raises():
    pos = np.array([[0, 0], [1, 0], [5, 5], [6, 5]], dtype=float)
    net = StreetNetwork(pos, [(0, 1, 1.0), (2, 3, 1.0)], [], [0], pos)
    with pytest.raises(UnreachableNode):
        net.shortest_path(0, 2)


def test_bad_edges_rejected():
    pos = np.array([[0, 0], [100, 0]], dtype=float)
    with pytest.raises(NetworkError):
        StreetNetwork(pos, [(0, 1, 0.0)], [], [], pos)
    with pytest.raises(NetworkError):
        StreetNetwork(pos, [(0, 1, 50.0)], [], [], pos)


def test_nearest_station_pred_false_is_none():
    net = line_network([100.0, 100.0], stations=[0, 2])
    assert net.nearest_station((0, 0), lambda s: False) is None


def test_nearest_station_single_match():
    net = line_network([100.0, 100.0], stations=[0, 2])
    assert net.nearest_station((0, 0), lambda s: s.id == "2").id == "2"


def test_nearest_station_tie_goes_to_smaller_id():
    # query node 1; stations at 120 m (node 0), 80 m (node 2), 80 m (node 3 via branch)
    pos = np.array([[-120, 0], [0, 0], [80, 0], [0, 80], [0, -80]], dtype=float)
    edges = [(0, 1, 120.0), (1, 2, 80.0), (1, 3, 80.0), (1, 4, 80.0)]
    st = [Station("1", 0, 5), Station("2", 2, 5), Station("3", 3, 5), Station("4", 4, 5)]
    net = StreetNetwork(pos, edges, st, [0], pos[[0, 2, 3, 4]])
    got = net.nearest_station((0, 0), lambda s: s.id != "2")
    assert got.id == "3"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nearest_and_within_match_exhaustive(seed):
    rng = np.random.default_rng(seed)
    nodes = rng.choice(16, size=5, replace=False).tolist()
    net = grid_network(4, 100.0, stations=nodes)
    pred_ids = {s.id for s in net.stations if rng.random() < 0.6}
    for q in range(16):
        pt = net.positions[q]
        cands = [(net.distance(q, s.node), s.id) for s in net.stations if s.id in pred_ids]
        got = net.nearest_station(pt, lambda s: s.id in pred_ids)
        if not cands:
            assert got is None
        else:
            dmin = min(d for d, _ in cands)
            want = min((s for d, s in cands if d == dmin), key=int)
            assert got.id == want
        r = float(rng.choice([0, 50, 100, 250, 1000]))
        excl = {s.id for s in net.stations if rng.random() < 0.3}
        want = sorted(s.id for s in net.stations if net.distance(q, s.node) <= r and s.id not in excl)
        got = sorted(s.id for s in net.stations_within(pt, r, excl))
        assert got == want


def test_within_edge_cases():
    net = line_network([100.0, 100.0], stations=[0, 2])
    assert net.stations_within((100, 0), 0) == []
    assert [s.id for s in net.stations_within((100, 0), 1e6)] == ["1", "2"]
    assert net.stations_within((100, 0), 1e6, exclude=["1", "2"]) == []


def test_station_ids_numeric_order():
    net = line_network([10.0] * 11, stations=list(range(11)))
    st = [Station(str(k), k, 5) for k in (10, 2, 1)]
    net = StreetNetwork(net.positions, net.edges, st, [0], net.bounds)
    assert net.station_ids == ["1", "2", "10"]


def test_geojson_roundtrip_is_stable(tmp_path):
    net = grid_network(3, 100.0, stations=[4, 8], boundary=[0, 2])
    doc = network_to_geojson(net)
    a = network_from_geojson(doc)
    # shuffled feature order gives identical node numbering
    doc2 = dict(doc, features=list(reversed(doc["features"])))
    b = network_from_geojson(doc2)
    assert np.array_equal(a.positions, b.positions)
    assert sorted(a.edges) == sorted(b.edges)
    assert a.stations == b.stations and a.boundary_points == b.boundary_points
    assert np.allclose(a.station_distances, net.station_distances)
    p = tmp_path / "n.geojson"
    p.write_text(json.dumps(doc))
    assert load_network(p).station_ids == ["1", "2"]


def test_geojson_rejects_lonlat():
    doc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {}, "geometry": {"type": "LineString",
                                                           "coordinates": [[2.35, 48.85], [2.36, 48.86]]}}]}
    with pytest.raises(NetworkError):
        network_from_geojson(doc)


def test_findings():
    net = grid_network(3, 100.0, stations=[4], caps=[0], boundary=[0])
    assert any("capacity" in f for f in net.findings())
    net = grid_network(3, 100.0, stations=[4], boundary=[4])
    assert any("perimeter" in f for f in net.findings())
    assert grid_network(3, 100.0, stations=[4], boundary=[1]).findings() == []


def test_points_in_polygon_square():
    ring = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float)
    inside = points_in_polygon(np.array([[5, 5], [15, 5], [-1, -1], [9.9, 0.1]]), ring)
    assert inside.tolist() == [True, False, False, True]
