"""Road network graph, initial road features and transfer probabilities."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ParseError, ValidationError

NUM_ROAD_TYPES = 3
NUMERIC_COLUMNS = ("length", "lanes", "max_speed", "in_degree", "out_degree")

NODE_COLUMNS = ["road_id", "road_type", "length_m", "lanes", "max_speed_mps"]
EDGE_COLUMNS = ["from_id", "to_id"]


@dataclass(frozen=True)
class RoadNetwork:
    """Directed graph whose vertices are road segments.

    An edge ``(i, j)`` means a vehicle leaving road ``i`` can enter road ``j``.
    Degrees are always derived from ``edges``.
    """

    road_type: np.ndarray
    length: np.ndarray
    lanes: np.ndarray
    max_speed: np.ndarray
    edges: np.ndarray  # (E, 2) int64, sorted, unique
    in_degree: np.ndarray = field(init=False)
    out_degree: np.ndarray = field(init=False)

    def __post_init__(self):
        n = len(self.road_type)
        if n < 1:
            raise ValidationError("road network needs at least one road")
        for name in ("length", "lanes", "max_speed"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"feature column {name!r} has wrong length")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if edges.min() < 0 or edges.max() >= n:
                bad = edges[(edges < 0).any(1) | (edges >= n).any(1)][0]
                raise ValidationError(f"edge {tuple(bad)} references unknown road")
            loops = edges[edges[:, 0] == edges[:, 1]]
            if len(loops):
                raise ValidationError(f"self-loop edge ({loops[0, 0]}, {loops[0, 0]})")
            edges = np.unique(edges, axis=0)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "road_type", np.asarray(self.road_type, dtype=np.int64))
        for name in ("length", "lanes", "max_speed"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "out_degree", np.bincount(edges[:, 0], minlength=n))
        object.__setattr__(self, "in_degree", np.bincount(edges[:, 1], minlength=n))
        succ = [[] for _ in range(n)]
        for i, j in edges:
            succ[i].append(int(j))
        object.__setattr__(self, "_successors", tuple(tuple(s) for s in succ))
        object.__setattr__(self, "_edge_set", frozenset(map(tuple, edges.tolist())))

    @property
    def num_roads(self) -> int:
        return len(self.road_type)

    def successors(self, i: int) -> tuple:
        return self._successors[i]

    def has_edge(self, i: int, j: int) -> bool:
        return (i, j) in self._edge_set

    def adjacency(self) -> sp.csr_matrix:
        n = self.num_roads
        data = np.ones(len(self.edges), dtype=np.float64)
        return sp.csr_matrix((data, (self.edges[:, 0], self.edges[:, 1])), shape=(n, n))

    def check_path(self, roads: Sequence[int]) -> None:
        for k, (a, b) in enumerate(zip(roads[:-1], roads[1:])):
            if not self.has_edge(int(a), int(b)):
                raise ValidationError(f"roads {a} -> {b} at position {k} are not adjacent")

    def to_csv(self, nodes_path, edges_path) -> None:
        with open(nodes_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(NODE_COLUMNS)
            for i in range(self.num_roads):
                w.writerow([i, int(self.road_type[i]), repr(float(self.length[i])),
                            int(self.lanes[i]), repr(float(self.max_speed[i]))])
        with open(edges_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(EDGE_COLUMNS)
            for i, j in self.edges:
                w.writerow([int(i), int(j)])


def _read_rows(path: Path, columns: list[str]):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ParseError(path, 1, "missing header row")
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise ParseError(path, 1, f"missing columns {missing}")
        idx = [header.index(c) for c in columns]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            yield lineno, [row[k].strip() for k in idx]


def load_road_network(nodes_path, edges_path) -> RoadNetwork:
    """Read the nodes/edges CSV pair. Degree columns in the input are ignored."""
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    rows = {}
    for lineno, (rid, rtype, length, lanes, speed) in _read_rows(nodes_path, NODE_COLUMNS):
        try:
            rec = (int(rtype), float(length), float(lanes), float(speed))
            rid = int(rid)
        except ValueError as exc:
            raise ParseError(nodes_path, lineno, str(exc)) from None
        if rid in rows:
            raise ParseError(nodes_path, lineno, f"duplicate road_id {rid}")
        rows[rid] = rec
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise ValidationError("road_id values must be dense 0-based integers")
    edges = []
    for lineno, (a, b) in _read_rows(edges_path, EDGE_COLUMNS):
        try:
            edges.append((int(a), int(b)))
        except ValueError as exc:
            raise ParseError(edges_path, lineno, str(exc)) from None
    cols = list(zip(*(rows[i] for i in range(n)))) if n else [[], [], [], []]
    return RoadNetwork(
        road_type=np.array(cols[0], dtype=np.int64),
        length=np.array(cols[1]),
        lanes=np.array(cols[2]),
        max_speed=np.array(cols[3]),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
    )


def _zscore(col: np.ndarray) -> np.ndarray:
    std = col.std()
    if std == 0:
        return np.zeros_like(col)
    return (col - col.mean()) / std


def encode_road_features(network: RoadNetwork, num_types: int = NUM_ROAD_TYPES) -> np.ndarray:
    """One-hot road type followed by z-scored numeric columns, shape (|V|, num_types + 5)."""
    types = network.road_type
    if types.min() < 0 or types.max() >= num_types:
        bad = types[(types < 0) | (types >= num_types)][0]
        raise ValidationError(f"unknown road type code {bad}")
    onehot = np.eye(num_types)[types]
    numeric = [getattr(network, c).astype(np.float64) for c in NUMERIC_COLUMNS]
    return np.concatenate([onehot, np.stack([_zscore(c) for c in numeric], axis=1)], axis=1)


def compute_transfer_probabilities(network: RoadNetwork,
                                   corpus: Iterable[Sequence[int]]) -> sp.csr_matrix:
    """Empirical transition frequencies count(i -> j) / count(i) over road sequences.

    ``corpus`` holds road-id sequences (or objects with a ``roads`` attribute).
    """
    n = network.num_roads
    visits = np.zeros(n, dtype=np.int64)
    pairs: dict[tuple[int, int], int] = {}
    for traj in corpus:
        roads = getattr(traj, "roads", traj)
        roads = [int(r) for r in roads]
        network.check_path(roads)
        for r in roads:
            visits[r] += 1
        for a, b in zip(roads[:-1], roads[1:]):
            pairs[(a, b)] = pairs.get((a, b), 0) + 1
    if not pairs:
        return sp.csr_matrix((n, n), dtype=np.float64)
    keys = sorted(pairs)
    rows = np.array([k[0] for k in keys])
    cols = np.array([k[1] for k in keys])
    vals = np.array([pairs[k] for k in keys], dtype=np.float64) / visits[rows]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
