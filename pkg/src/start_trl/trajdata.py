"""Trajectory records, preprocessing, splits, time indices and the synthetic corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np
from scipy.sparse.csgraph import dijkstra

from .errors import ParseError, ValidationError
from .roadnet import NUM_ROAD_TYPES, RoadNetwork

MIN_LENGTH = 6
MAX_LENGTH = 128
SECONDS_PER_DAY = 86400
# 2015-11-02T00:00:00Z, a Monday
SYNTHETIC_EPOCH = 1446422400


@dataclass(frozen=True)
class Trajectory:
    traj_id: str
    user_id: str
    roads: tuple
    times: tuple
    label: object = None

    def __post_init__(self):
        object.__setattr__(self, "roads", tuple(int(r) for r in self.roads))
        object.__setattr__(self, "times", tuple(int(t) for t in self.times))
        if len(self.roads) != len(self.times):
            raise ValidationError(f"{self.traj_id}: roads and times differ in length")
        if any(b < a for a, b in zip(self.times[:-1], self.times[1:])):
            raise ValidationError(f"{self.traj_id}: timestamps decrease")

    def __len__(self):
        return len(self.roads)

    @property
    def duration(self) -> int:
        return self.times[-1] - self.times[0]

    def to_json(self) -> dict:
        out = {"traj_id": self.traj_id, "user_id": self.user_id,
               "roads": list(self.roads), "times": list(self.times)}
        if self.label is not None:
            out["label"] = self.label
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Trajectory":
        return cls(str(obj["traj_id"]), str(obj["user_id"]), obj["roads"], obj["times"],
                   obj.get("label"))


@dataclass
class TrajectoryDataset:
    trajectories: list
    network: RoadNetwork

    def __post_init__(self):
        for t in self.trajectories:
            self.network.check_path(t.roads)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def subset(self, trajectories) -> "TrajectoryDataset":
        return TrajectoryDataset(list(trajectories), self.network)


def read_corpus(path) -> list:
    trajs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                trajs.append(Trajectory.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(path, lineno, f"bad trajectory record: {exc}") from None
    return trajs


def write_corpus(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trajectories:
            f.write(json.dumps(t.to_json(), sort_keys=True) + "\n")


def preprocess(dataset: TrajectoryDataset, min_user_trajectories: int = 1) -> TrajectoryDataset:
    """Truncate to 128 roads, drop short and loop trajectories, then sparse users."""
    kept = []
    for t in dataset:
        if len(t) > MAX_LENGTH:
            t = replace(t, roads=t.roads[:MAX_LENGTH], times=t.times[:MAX_LENGTH])
        if len(t) < MIN_LENGTH or t.roads[0] == t.roads[-1]:
            continue
        kept.append(t)
    per_user: dict[str, int] = {}
    for t in kept:
        per_user[t.user_id] = per_user.get(t.user_id, 0) + 1
    kept = [t for t in kept if per_user[t.user_id] >= min_user_trajectories]
    return dataset.subset(kept)


def chronological_split(dataset: TrajectoryDataset, ratios=(0.6, 0.2, 0.2)):
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    ordered = sorted(dataset, key=lambda t: (t.times[0], t.traj_id))
    n = len(ordered)
    cut1 = round(n * ratios[0])
    cut2 = round(n * (ratios[0] + ratios[1]))
    return (dataset.subset(ordered[:cut1]), dataset.subset(ordered[cut1:cut2]),
            dataset.subset(ordered[cut2:]))


def minute_index(t):
    """Minute of the UTC day, 1..1440. Works on ints and integer numpy arrays."""
    return (t % SECONDS_PER_DAY) // 60 + 1


def day_of_week_index(t):
    """ISO weekday of the UTC date, Monday = 1."""
    return (t // SECONDS_PER_DAY + 3) % 7 + 1


@dataclass(frozen=True)
class HistoricalTravelTimes:
    per_road: np.ndarray
    global_mean: float

    def __getitem__(self, road) -> float:
        return float(self.per_road[road])


def historical_travel_times(train: Iterable[Trajectory], num_roads: int) -> HistoricalTravelTimes:
    """Mean gap to the next timestamp per road; unseen roads take the global mean."""
    total = np.zeros(num_roads)
    count = np.zeros(num_roads, dtype=np.int64)
    for t in train:
        gaps = np.diff(np.asarray(t.times, dtype=np.float64))
        np.add.at(total, np.asarray(t.roads[:-1], dtype=np.int64), gaps)
        np.add.at(count, np.asarray(t.roads[:-1], dtype=np.int64), 1)
    global_mean = float(total.sum() / count.sum()) if count.sum() else 1.0
    if global_mean <= 0:
        global_mean = 1.0
    per_road = np.full(num_roads, global_mean)
    seen = count > 0
    per_road[seen] = total[seen] / count[seen]
    # zero-gap roads would break the positivity invariant
    per_road[per_road <= 0] = global_mean
    return HistoricalTravelTimes(per_road, global_mean)


# ---------------------------------------------------------------------------
# synthetic data

SPEED_BY_TYPE = (8.3, 13.9, 22.2)
PEAK_MINUTES = (480, 1080)
PEAK_WIDTH = 90.0


def congestion(minute_of_day) -> float:
    m = np.asarray(minute_of_day, dtype=np.float64)
    return (1.0 + 0.8 * np.exp(-((m - PEAK_MINUTES[0]) / PEAK_WIDTH) ** 2)
            + 0.8 * np.exp(-((m - PEAK_MINUTES[1]) / PEAK_WIDTH) ** 2))


def is_peak(t: int) -> bool:
    m = (t % SECONDS_PER_DAY) / 60.0
    return any(abs(m - p) <= PEAK_WIDTH for p in PEAK_MINUTES)


def _grid_streets(grid_n: int):
    streets = []
    for r in range(grid_n):
        for c in range(grid_n):
            u = r * grid_n + c
            if c + 1 < grid_n:
                streets.append((u, u + 1))
            if r + 1 < grid_n:
                streets.append((u, u + grid_n))
    return streets


def generate_synthetic_network(grid_n: int, seed: int) -> RoadNetwork:
    """Grid city: each undirected street between neighbouring intersections gives two roads."""
    if grid_n < 3:
        raise ValueError("grid_n must be at least 3")
    rng = np.random.default_rng([seed, 0x6E7])
    streets = _grid_streets(grid_n)
    s = len(streets)
    street_type = rng.integers(0, NUM_ROAD_TYPES, size=s)
    street_len = rng.uniform(50.0, 500.0, size=s).round(1)
    tail, head, rtype, length, lanes, speed = [], [], [], [], [], []
    for k, (u, v) in enumerate(streets):
        for a, b in ((u, v), (v, u)):
            tail.append(a)
            head.append(b)
            rtype.append(street_type[k])
            length.append(street_len[k])
            lanes.append(rng.integers(1, 5))
            speed.append(SPEED_BY_TYPE[street_type[k]])
    tail, head = np.array(tail), np.array(head)
    by_tail: dict[int, list[int]] = {}
    for rid, a in enumerate(tail):
        by_tail.setdefault(int(a), []).append(rid)
    edges = [(i, j) for i in range(len(tail)) for j in by_tail[int(head[i])]
             if head[j] != tail[i]]  # no U-turns
    return RoadNetwork(np.array(rtype), np.array(length), np.array(lanes, dtype=np.float64),
                       np.array(speed), np.array(edges, dtype=np.int64))


def free_flow_times(network: RoadNetwork) -> np.ndarray:
    return network.length / network.max_speed


def generate_synthetic_trajectories(network: RoadNetwork, count: int, seed: int,
                                    num_drivers: int = 10, days: int = 14,
                                    detour_prob: float = 0.1) -> TrajectoryDataset:
    """Sample ``count`` trajectories over ``days`` simulated days.

    Routes follow free-flow shortest paths with a random wrong turn taken at
    each step with probability ``detour_prob``. Each driver has a home road
    cluster that most of their trips start from. Labels: ``label`` is 1 when
    the departure falls in a rush-hour window, ``user_id`` is the driver.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng([seed, 0x7A1])
    n = network.num_roads
    cost = free_flow_times(network)
    adj = network.adjacency().multiply(cost[None, :]).tocsr()
    # dist[a, b]: free-flow time spent on roads after a up to and including b
    dist = dijkstra(adj, directed=True)
    homes = rng.integers(0, n, size=num_drivers)
    home_dist = dist[homes]
    trajs = []
    attempts = 0
    while len(trajs) < count:
        attempts += 1
        if attempts > 100 * count:
            raise RuntimeError("could not generate enough valid trajectories")
        driver = int(rng.integers(num_drivers))
        if rng.random() < 0.7:
            near = np.flatnonzero(home_dist[driver] <= np.quantile(home_dist[driver], 0.1))
            origin = int(rng.choice(near))
        else:
            origin = int(rng.integers(n))
        dest = int(rng.integers(n))
        if origin == dest or not np.isfinite(dist[origin, dest]):
            continue
        roads = _route(network, cost, dist, origin, dest, detour_prob, rng)
        if roads is None or len(roads) < MIN_LENGTH:
            continue
        day = int(rng.integers(days))
        if rng.random() < 0.5:
            minute = rng.normal(PEAK_MINUTES[int(rng.integers(2))], 60.0)
        else:
            minute = rng.uniform(0, 1440)
        minute = int(minute) % 1440
        t = SYNTHETIC_EPOCH + day * SECONDS_PER_DAY + minute * 60 + int(rng.integers(60))
        times = [t]
        for r in roads[:-1]:
            m = (t % SECONDS_PER_DAY) / 60.0
            travel = cost[r] * float(congestion(m)) * rng.uniform(0.9, 1.1)
            t += max(1, int(round(travel)))
            times.append(t)
        trajs.append(Trajectory(f"t{len(trajs):06d}", f"driver_{driver:02d}", roads, times,
                                int(is_peak(times[0]))))
    return TrajectoryDataset(trajs, network)


def _route(network, cost, dist, origin, dest, detour_prob, rng):
    roads = [origin]
    cur = origin
    while cur != dest:
        if len(roads) >= MAX_LENGTH:
            return None
        succ = network.successors(cur)
        remaining = [cost[b] + dist[b, dest] for b in succ]
        best = succ[int(np.argmin(remaining))]
        nxt = best
        if len(succ) > 1 and rng.random() < detour_prob:
            others = [b for b in succ if b != best]
            nxt = others[int(rng.integers(len(others)))]
        roads.append(nxt)
        cur = nxt
    return roads
