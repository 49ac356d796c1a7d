import numpy as np
import pytest
import torch

from start_trl.roadnet import RoadNetwork, compute_transfer_probabilities
from start_trl.tpe_gat import RoadGraph
from start_trl.trajdata import (Trajectory, generate_synthetic_network,
                                generate_synthetic_trajectories, historical_travel_times)

torch.set_num_threads(1)

# filled by tests/test_acceptance.py, printed once at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def line_network(n=4):
    """0 -> 1 -> ... -> n-1, unit features."""
    edges = np.array([(i, i + 1) for i in range(n - 1)])
    return RoadNetwork(np.zeros(n, dtype=int), np.full(n, 100.0), np.ones(n),
                       np.full(n, 10.0), edges)


@pytest.fixture(scope="session")
def small_world():
    """A 4x4 grid (48 roads) with 300 trajectories, shared read-only across tests."""
    net = generate_synthetic_network(4, 7)
    trajs = list(generate_synthetic_trajectories(net, 300, 7))
    graph = RoadGraph.build(net, compute_transfer_probabilities(net, trajs))
    hist = historical_travel_times(trajs, net.num_roads)
    return net, trajs, graph, hist


def irregular_trajectory(net, rng, n=8, tid="t"):
    """Random walk with strongly uneven gaps."""
    start = int(rng.integers(net.num_roads))
    roads = [start]
    while len(roads) < n:
        nxt = net.successors(roads[-1])
        roads.append(int(nxt[rng.integers(len(nxt))]))
    gaps = rng.choice([1, 5, 40, 300, 2000], size=n - 1)
    t0 = 1446422400 + int(rng.integers(0, 14 * 86400))
    times = [t0] + list(t0 + np.cumsum(gaps))
    return Trajectory(tid, "u", roads, [int(t) for t in times])
