import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from start_trl.roadnet import RoadNetwork
from start_trl.simsearch import (DetourQuerySet, all_simple_paths, build_query_sets, generate_detour,
                                 knn_eval, most_similar_eval, path_cost, rank_metrics, truth_ranks,
                                 yen_k_shortest_paths)
from start_trl.trajdata import HistoricalTravelTimes, Trajectory

import scalar_oracles as oracle


def network(n, edges):
    return RoadNetwork(np.zeros(n, dtype=int), np.full(n, 100.0), np.ones(n), np.full(n, 10.0),
                       np.array(edges).reshape(-1, 2))


DIAMOND = [(0, 1), (0, 2), (1, 3), (2, 3)]
DIAMOND_W = np.array([1.0, 1.0, 3.0, 3.0])


def test_diamond():
    got = yen_k_shortest_paths(network(4, DIAMOND), 0, 3, 2, DIAMOND_W)
    assert [(p.cost, p.roads) for p in got] == [(5.0, (0, 1, 3)), (7.0, (0, 2, 3))]
    want = oracle.simple_paths(DIAMOND, 0, 3, dict(enumerate(DIAMOND_W.tolist())))
    assert [(p.cost, p.roads) for p in got] == want
    # asking for more than exist returns all of them
    assert len(yen_k_shortest_paths(network(4, DIAMOND), 0, 3, 10, DIAMOND_W)) == 2


def test_unreachable():
    net = network(4, [(1, 2), (2, 3)])
    assert yen_k_shortest_paths(net, 0, 3, 3, np.ones(4)) == []
    assert yen_k_shortest_paths(net, 3, 1, 3, np.ones(4)) == []


def test_same_endpoints_is_single_road():
    got = yen_k_shortest_paths(network(4, DIAMOND), 2, 2, 3, DIAMOND_W)
    assert [p.roads for p in got] == [(2,)]


def test_bad_arguments():
    with pytest.raises(ValueError):
        yen_k_shortest_paths(network(4, DIAMOND), 0, 3, 0, DIAMOND_W)
    with pytest.raises(ValueError):
        yen_k_shortest_paths(network(4, DIAMOND), 0, 3, 2, np.array([1.0, 0.0, 1.0, 1.0]))


def test_equal_costs_ordered_lexicographically():
    got = yen_k_shortest_paths(network(4, DIAMOND), 0, 3, 2, np.ones(4))
    assert [p.roads for p in got] == [(0, 1, 3), (0, 2, 3)]


def random_graph(rng, n):
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    keep = rng.random(len(pairs)) < rng.uniform(0.2, 0.6)
    edges = [p for p, k in zip(pairs, keep) if k] or [(0, 1)]
    return network(n, edges), edges


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8), st.integers(1, 12), st.booleans())
def test_yen_matches_exhaustive(seed, n, k, integer_weights):
    rng = np.random.default_rng(seed)
    net, edges = random_graph(rng, n)
    w = rng.integers(1, 4, n).astype(float) if integer_weights else rng.uniform(0.5, 10, n)
    src, dst = (int(x) for x in rng.choice(n, 2, replace=False))
    got = yen_k_shortest_paths(net, src, dst, k, w)
    truth = [(c, p) for c, p in oracle.simple_paths(edges, src, dst, dict(enumerate(w.tolist())))
             if p[0] == src and p[-1] == dst]
    truth.sort(key=lambda cp: (round(cp[0], 9), cp[1]))
    assert [p.roads for p in got] == [p for _, p in truth[:k]]
    costs = [p.cost for p in got]
    assert costs == sorted(costs)
    assert [p.roads for p in all_simple_paths(net, src, dst, w)] == [p for _, p in truth]


def test_k1_is_dijkstra():
    # one shortest route among several detours around a chain
    edges = [(0, 1), (1, 2), (2, 3), (0, 4), (4, 3), (1, 5), (5, 3)]
    w = np.array([1.0, 1.0, 1.0, 1.0, 5.0, 0.5])
    assert yen_k_shortest_paths(network(6, edges), 0, 3, 1, w)[0].roads == (0, 1, 5, 3)


def hist_of(w):
    w = np.asarray(w, dtype=float)
    return HistoricalTravelTimes(w, float(w.mean()))


def two_road_case(alternatives):
    # S_a = [0, 1] costs 10 + 90 = 100 s; each alternative goes 0 -> x -> 1
    w = [10.0, 90.0] + [c - 100.0 for c in alternatives]
    edges = [(0, 1)] + [e for x in range(2, 2 + len(alternatives)) for e in ((0, x), (x, 1))]
    traj = Trajectory("q", "u", [0, 1], [0, 10])
    return traj, network(len(w), edges), hist_of(w)


def test_detour_threshold_example():
    traj, net, hist = two_road_case([110.0, 125.0])
    out = generate_detour(traj, 0.2, 0.2, net, hist, np.random.default_rng(0))
    assert out.roads == (0, 3, 1)  # 110 s rejected, 125 s accepted
    assert path_cost(out.roads, hist.per_road) == 125.0
    traj, net, hist = two_road_case([110.0])
    assert generate_detour(traj, 0.2, 0.2, net, hist, np.random.default_rng(0)) is None


class SpyRng:
    """Delegates to a Generator and records every ``integers`` draw."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.calls = []

    def integers(self, low, high=None, *args, **kwargs):
        out = self.rng.integers(low, high, *args, **kwargs)
        self.calls.append((low, high, int(out)))
        return out


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_detour_properties(small_world, seed):
    net, trajs, _, hist = small_world
    rng = np.random.default_rng(seed)
    long = [t for t in trajs if len(t) >= 8]
    traj = long[int(rng.integers(len(long)))]
    spy = SpyRng(seed)
    out = generate_detour(traj, 0.2, 0.2, net, hist, spy)
    low, high, size = spy.calls[0]
    assert (low, high) == (2, max(2, int(0.2 * len(traj))) + 1)
    _, _, start = spy.calls[1]
    if out is None:
        return
    n = len(traj)
    net.check_path(out.roads)
    assert out.roads[:start + 1] == traj.roads[:start + 1]
    suffix = n - start - size + 1
    assert out.roads[-suffix:] == traj.roads[-suffix:]
    assert all(b >= a for a, b in zip(out.times, out.times[1:]))
    assert out.times[:start + 1] == traj.times[:start + 1]
    assert len(set(out.roads[start:len(out) - suffix + 1])) == len(out) - suffix + 1 - start


def test_segment_length_bound():
    # |T| = 30 and p_d = 0.2 allow at most 6 roads in S_a
    n = 30
    traj = Trajectory("t", "u", list(range(n)), list(range(0, 10 * n, 10)))
    net = network(n, [(i, i + 1) for i in range(n - 1)])
    sizes = set()
    for seed in range(200):
        spy = SpyRng(seed)
        generate_detour(traj, 0.2, 0.2, net, hist_of(np.ones(n)), spy)
        sizes.add(spy.calls[0][2])
    assert sizes == {2, 3, 4, 5, 6}


def test_query_sets(small_world, tmp_path):
    net, trajs, _, hist = small_world
    qs = build_query_sets(trajs, net, hist, 5, 50, seed=3)
    db = qs.database()
    assert len(db) == 55 and len(qs.query_detours) == 5
    assert not {t.traj_id for t in qs.queries} & {t.traj_id for t in qs.negatives}
    for q, g in zip(qs.queries, qs.truth):
        assert db[g].traj_id == q.traj_id + "_detour"
        assert sum(t.traj_id == q.traj_id + "_detour" for t in db) == 1
    for t in db:
        net.check_path(t.roads)
    again = build_query_sets(trajs, net, hist, 5, 50, seed=3)
    assert again.database() == db
    qs.save(tmp_path / "qs")
    back = DetourQuerySet.load(tmp_path / "qs")
    assert back.database() == db and back.truth == qs.truth and back.queries == qs.queries
    assert back.manifest["n_negatives"] == 50


def test_query_sets_too_small(small_world):
    net, trajs, _, hist = small_world
    with pytest.raises(ValueError, match="need at least 400"):
        build_query_sets(trajs[:20], net, hist, 100, 300)


def test_rank_metrics_example():
    m = rank_metrics([1, 2, 5])
    assert m["MR"] == pytest.approx(8 / 3)
    assert m["HR@1"] == pytest.approx(1 / 3)
    assert m["HR@5"] == 1.0


def test_perfect_retrieval():
    db = np.eye(6)
    m = most_similar_eval(db[[2, 4]] * 0.9, db, [2, 4])
    assert m == {"MR": 1.0, "HR@1": 1.0, "HR@5": 1.0}
    assert knn_eval(db[:3], db[:3], db, k=3) == {"Precision@3": 1.0}


def test_ties_broken_by_index():
    db = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    q = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert truth_ranks(q, db, [0, 1]).tolist() == [1, 2]


def test_random_representations_mean_rank():
    rng = np.random.default_rng(11)
    db = rng.normal(size=(550, 16))
    q = rng.normal(size=(200, 16))
    truth = rng.integers(0, 550, 200)
    mr = most_similar_eval(q, db, truth)["MR"]
    assert abs(mr - 275.5) <= 0.15 * 275.5


def test_missing_truth_index():
    with pytest.raises(ValueError, match="not in the database"):
        truth_ranks(np.zeros((1, 2)), np.zeros((3, 2)), [3])
