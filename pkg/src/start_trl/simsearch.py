"""Detour ground truth for similarity search and the retrieval metrics over it."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .roadnet import RoadNetwork
from .trajdata import HistoricalTravelTimes, Trajectory

_TOL = 1e-9


@dataclass(frozen=True, order=True)
class PathCandidate:
    cost: float
    roads: tuple


def path_cost(roads: Sequence[int], weights: np.ndarray) -> float:
    """Cost of a road path: sum of the per-road weights of every road on it.

    fsum is correctly rounded, so paths over the same roads in any order cost exactly
    the same and equal-cost ties fall through to the lexicographic rule.
    """
    return math.fsum(float(weights[r]) for r in roads)


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= _TOL * max(1.0, abs(a), abs(b))


def _predecessors(network: RoadNetwork) -> dict:
    preds: dict[int, list[int]] = {}
    for a, b in network.edges:
        preds.setdefault(int(b), []).append(int(a))
    return preds


def _best_path(network: RoadNetwork, preds: dict, src: int, dst: int, weights: np.ndarray,
               banned_nodes: set, banned_edges: set):
    """Cheapest src->dst path avoiding the banned items; ties -> lexicographically smallest.

    Runs Dijkstra backwards from ``dst`` for cost-to-go, then walks forward picking
    the smallest road id that stays on a cheapest path.
    """
    if src in banned_nodes or dst in banned_nodes:
        return None
    togo = {dst: float(weights[dst])}
    heap = [(togo[dst], dst)]
    done = set()
    while heap:
        c, v = heapq.heappop(heap)
        if v in done:
            continue
        done.add(v)
        for u in preds.get(v, ()):
            if u in banned_nodes or (u, v) in banned_edges or u in done:
                continue
            nc = c + float(weights[u])
            if nc < togo.get(u, math.inf):
                togo[u] = nc
                heapq.heappush(heap, (nc, u))
    if src not in togo:
        return None
    path = [src]
    cur = src
    while cur != dst:
        need = togo[cur] - float(weights[cur])
        nxt = min(v for v in network.successors(cur)
                  if v in togo and v not in banned_nodes and (cur, v) not in banned_edges
                  and _close(togo[v], need))
        path.append(nxt)
        cur = nxt
    return tuple(path)


def yen_k_shortest_paths(network: RoadNetwork, src: int, dst: int, k: int,
                         weights: np.ndarray) -> list[PathCandidate]:
    """Up to ``k`` loopless src->dst road paths by ascending cost (ties: lexicographic)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    weights = np.asarray(weights, dtype=np.float64)
    if (weights <= 0).any():
        raise ValueError("road weights must be positive")
    preds = _predecessors(network)
    first = _best_path(network, preds, src, dst, weights, set(), set())
    if first is None:
        return []
    found = [first]
    seen = {first}
    pool: list[tuple[float, tuple]] = []
    while len(found) < k:
        last = found[-1]
        for i in range(len(last) - 1):
            root = last[:i + 1]
            spur = last[i]
            banned_edges = {(p[i], p[i + 1]) for p in found if len(p) > i + 1 and p[:i + 1] == root}
            banned_nodes = set(root[:-1])
            tail = _best_path(network, preds, spur, dst, weights, banned_nodes, banned_edges)
            if tail is None:
                continue
            cand = root[:-1] + tail
            if cand not in seen:
                seen.add(cand)
                heapq.heappush(pool, (path_cost(cand, weights), cand))
        if not pool:
            break
        found.append(heapq.heappop(pool)[1])
    return [PathCandidate(path_cost(p, weights), p) for p in found]


def all_simple_paths(network: RoadNetwork, src: int, dst: int, weights) -> list[PathCandidate]:
    """Exhaustive enumeration, sorted by (cost, roads). Only for small graphs."""
    out = []

    def walk(path, on_path):
        v = path[-1]
        if v == dst:
            out.append(PathCandidate(path_cost(path, weights), tuple(path)))
            return
        for u in network.successors(v):
            if u not in on_path:
                on_path.add(u)
                path.append(u)
                walk(path, on_path)
                path.pop()
                on_path.discard(u)

    walk([src], {src})
    return sorted(out)


# ---------------------------------------------------------------------------
# detours


def relative_change(original: float, candidate: float) -> float:
    return abs(candidate - original) / original


def generate_detour(traj: Trajectory, p_d: float, t_d: float, network: RoadNetwork,
                    hist: HistoricalTravelTimes, rng: np.random.Generator,
                    k_max: int = 10) -> Trajectory | None:
    """Replace one short sub-path by an alternative route of clearly different travel time.

    Returns ``None`` when no alternative among the ``k_max`` cheapest qualifies.
    """
    n = len(traj)
    if n < 2 or not 0 < p_d < 1 or t_d <= 0:
        raise ValueError("generate_detour needs |T| >= 2, 0 < p_d < 1 and t_d > 0")
    max_len = min(n, max(2, math.floor(p_d * n)))
    size = int(rng.integers(2, max_len + 1))
    start = int(rng.integers(0, n - size + 1))
    seg = traj.roads[start:start + size]
    weights = hist.per_road
    base = path_cost(seg, weights)
    for cand in yen_k_shortest_paths(network, seg[0], seg[-1], k_max, weights):
        if cand.roads == seg:
            continue
        if relative_change(base, cand.cost) < t_d:
            continue
        return splice(traj, start, size, cand.roads, hist)
    return None


def splice(traj: Trajectory, start: int, size: int, replacement: Sequence[int],
           hist: HistoricalTravelTimes) -> Trajectory:
    """Swap ``roads[start:start+size]`` for ``replacement`` (same endpoints).

    Times inside the replacement follow the historical per-road travel times; the
    suffix keeps its original gaps, shifted by the change in arrival time.
    """
    roads = list(traj.roads[:start]) + list(replacement) + list(traj.roads[start + size:])
    times = list(traj.times[:start + 1])
    for r in replacement[:-1]:
        times.append(times[-1] + max(1, int(round(hist[r]))))
    shift = times[-1] - traj.times[start + size - 1]
    times.extend(t + shift for t in traj.times[start + size:])
    return Trajectory(traj.traj_id + "_detour", traj.user_id, roads, times, traj.label)


def detour_with_retries(traj, p_d, t_d, network, hist, rng, k_max=10, tries=10):
    for _ in range(tries):
        out = generate_detour(traj, p_d, t_d, network, hist, rng, k_max)
        if out is not None:
            return out
    return None


@dataclass
class DetourQuerySet:
    queries: list  # D_Q
    query_detours: list  # D_Q'
    negatives: list  # D_N
    negative_detours: list  # D_N'
    truth: list  # index in database() of each query's detour
    manifest: dict

    def database(self) -> list:
        return list(self.negative_detours) + list(self.query_detours)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "manifest.json").write_text(json.dumps(self.manifest, sort_keys=True, indent=2) + "\n")
        for name in ("queries", "query_detours", "negatives", "negative_detours"):
            with open(path / f"{name}.jsonl", "w", encoding="utf-8") as f:
                for t in getattr(self, name):
                    f.write(json.dumps(t.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DetourQuerySet":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        parts = {}
        for name in ("queries", "query_detours", "negatives", "negative_detours"):
            with open(path / f"{name}.jsonl", encoding="utf-8") as f:
                parts[name] = [Trajectory.from_json(json.loads(line)) for line in f if line.strip()]
        n_neg = len(parts["negative_detours"])
        truth = [n_neg + i for i in range(len(parts["query_detours"]))]
        return cls(truth=truth, manifest=manifest, **parts)


def build_query_sets(test: Sequence[Trajectory], network: RoadNetwork,
                     hist: HistoricalTravelTimes, n_queries: int, n_negatives: int,
                     p_d: float = 0.2, t_d: float = 0.2, seed: int = 0,
                     k_max: int = 10) -> DetourQuerySet:
    """Sample disjoint query and negative trajectories and detour each of them.

    Trajectories whose detour fails after the retries are replaced by fresh ones.
    """
    need = n_queries + n_negatives
    if len(test) < need:
        raise ValueError(f"need at least {need} trajectories ({n_queries} queries + "
                         f"{n_negatives} negatives), got {len(test)}")
    rng = np.random.default_rng([seed, 0x51])
    order = rng.permutation(len(test))
    picked: list[tuple[Trajectory, Trajectory]] = []
    for idx in order:
        t = test[int(idx)]
        d = detour_with_retries(t, p_d, t_d, network, hist, rng, k_max)
        if d is not None:
            picked.append((t, d))
        if len(picked) == need:
            break
    if len(picked) < need:
        raise ValueError(f"only {len(picked)} trajectories admit a detour; {need} required")
    q, neg = picked[:n_queries], picked[n_queries:]
    manifest = {"seed": seed, "n_queries": n_queries, "n_negatives": n_negatives,
                "p_d": p_d, "t_d": t_d, "k_max": k_max}
    return DetourQuerySet([a for a, _ in q], [b for _, b in q], [a for a, _ in neg],
                          [b for _, b in neg], [n_negatives + i for i in range(n_queries)],
                          manifest)


# ---------------------------------------------------------------------------
# retrieval metrics


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def truth_ranks(query: np.ndarray, database: np.ndarray, truth: Sequence[int]) -> np.ndarray:
    """1-based rank of each query's ground truth by Euclidean distance; ties -> lower index first."""
    dist = pairwise_distances(query, database)
    ranks = []
    for i, g in enumerate(truth):
        if not 0 <= g < database.shape[0]:
            raise ValueError(f"ground-truth index {g} of query {i} is not in the database")
        row = dist[i]
        ranks.append(1 + int((row < row[g]).sum()) + int((row[:g] == row[g]).sum()))
    return np.array(ranks)


def rank_metrics(ranks: Sequence[int]) -> dict:
    ranks = np.asarray(ranks)
    return {"MR": float(ranks.mean()), "HR@1": float((ranks <= 1).mean()),
            "HR@5": float((ranks <= 5).mean())}


def most_similar_eval(query: np.ndarray, database: np.ndarray, truth: Sequence[int]) -> dict:
    return rank_metrics(truth_ranks(query, database, truth))


def knn_indices(query: np.ndarray, database: np.ndarray, k: int) -> np.ndarray:
    dist = pairwise_distances(query, database)
    # stable sort keeps the lower database index first on ties
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def knn_eval(query: np.ndarray, detoured_query: np.ndarray, database: np.ndarray, k: int = 5) -> dict:
    """Overlap between the k nearest neighbours of each query and of its detour."""
    truth = knn_indices(query, database, k)
    found = knn_indices(detoured_query, database, k)
    overlap = [len(set(a) & set(b)) / k for a, b in zip(truth, found)]
    return {f"Precision@{k}": float(np.mean(overlap))}
