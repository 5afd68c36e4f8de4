from pathlib import Path

import numpy as np
import pytest

from bikeabm.network import Station, StreetNetwork
from bikeabm.scenario import load_scenario

ROOT = Path(__file__).resolve().parents[1]
SYNTHETIC = ROOT / "scenarios" / "synthetic"


def line_network(lengths, stations=(), boundary=(0,), caps=None):
    """Nodes 0..n on the x axis joined by edges of the given lengths."""
    xs = np.concatenate([[0.0], np.cumsum(lengths)])
    pos = np.column_stack([xs, np.zeros_like(xs)])
    edges = [(i, i + 1, float(l)) for i, l in enumerate(lengths)]
    caps = caps or [10] * len(stations)
    st = [Station(str(k + 1), node, c) for k, (node, c) in enumerate(zip(stations, caps))]
    bounds = np.array([[0, -1], [xs[-1], -1], [xs[-1], 1], [0, 1]], dtype=float)
    return StreetNetwork(pos, edges, st, list(boundary), bounds)


def grid_network(n=3, step=100.0, stations=(), caps=None, boundary=(0,)):
    pos = np.array([(i * step, j * step) for j in range(n) for i in range(n)], dtype=float)
    edges = []
    for j in range(n):
        for i in range(n):
            if i + 1 < n:
                edges.append((j * n + i, j * n + i + 1, step))
            if j + 1 < n:
                edges.append((j * n + i, (j + 1) * n + i, step))
    caps = caps or [10] * len(stations)
    st = [Station(str(k + 1), node, c) for k, (node, c) in enumerate(zip(stations, caps))]
    side = (n - 1) * step
    bounds = np.array([[0, 0], [side, 0], [side, side], [0, side]], dtype=float)
    return StreetNetwork(pos, edges, st, list(boundary), bounds)


@pytest.fixture(scope="session")
def synthetic():
    return load_scenario(SYNTHETIC)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
