"""Self-supervised pretraining: span-masked recovery plus contrastive views."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import StartModel
from .tat_enc import TrajectoryBatch
from .tpe_gat import RoadGraph
from .trajdata import HistoricalTravelTimes, Trajectory

log = logging.getLogger(__name__)

STRATEGIES = ("trim", "temporal_shift", "segment_mask", "dropout")

# seed-stream purposes
_SHUFFLE, _MASK, _AUG_A, _AUG_B, _EVAL = 1, 2, 3, 4, 5


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def item_rng(seed: int, purpose: int, epoch: int, traj_id: str) -> np.random.Generator:
    """Generator keyed by (seed, purpose, epoch, trajectory) so data prep order never matters."""
    return np.random.default_rng([seed, purpose, epoch, zlib.crc32(traj_id.encode())])


# ---------------------------------------------------------------------------
# span masking


@dataclass(frozen=True)
class MaskedSample:
    trajectory: Trajectory
    positions: tuple  # 0-based road positions replaced by [MASK]
    targets: tuple  # original road ids at those positions


def span_sizes(n: int, ratio: float, span: int) -> list[int]:
    total = max(1, round_half_up(ratio * n))
    sizes = [span] * (total // span)
    if total % span:
        sizes.append(total % span)
    return sizes


def span_mask(traj: Trajectory, ratio: float, span: int, rng: np.random.Generator,
              max_tries: int = 100) -> MaskedSample:
    n = len(traj)
    if n < 2 or not 0 < ratio < 1 or span < 1:
        raise ValueError("span_mask needs |T| >= 2, 0 < ratio < 1 and span >= 1")
    taken = np.zeros(n, dtype=bool)
    for size in span_sizes(n, ratio, span):
        for _ in range(max_tries):
            start = int(rng.integers(0, n - size + 1)) if size <= n else 0
            if size <= n and not taken[start:start + size].any():
                taken[start:start + size] = True
                break
        else:
            # no room for the requested spans
            taken[:] = False
            taken[int(rng.integers(n))] = True
            break
    pos = tuple(int(p) for p in np.flatnonzero(taken))
    return MaskedSample(traj, pos, tuple(traj.roads[p] for p in pos))


def masked_recovery_loss(logits: torch.Tensor, targets: torch.Tensor, owner: torch.Tensor,
                         batch_size: int) -> torch.Tensor:
    """Cross-entropy over masked tokens, averaged per trajectory and then over the batch.

    ``logits`` (M, |V|) and ``targets`` (M,) list the masked tokens; ``owner`` (M,)
    gives the batch row each token belongs to.
    """
    if targets.numel() == 0:
        raise ValueError("no masked positions")
    nll = F.cross_entropy(logits, targets, reduction="none")
    per_row = torch.zeros(batch_size, dtype=nll.dtype).index_add(0, owner, nll)
    counts = torch.zeros(batch_size, dtype=nll.dtype).index_add(0, owner, torch.ones_like(nll))
    present = counts > 0
    return (per_row[present] / counts[present]).mean()


def masked_logits(z: torch.Tensor, batch: TrajectoryBatch, head: nn.Linear):
    """Project only masked positions through the recovery head."""
    rows, cols = torch.nonzero(batch.masked, as_tuple=True)
    return head(z[rows, cols]), batch.targets[rows, cols], rows


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentedView:
    trajectory: Trajectory
    strategy: str
    masked: tuple = ()
    dropped: tuple = ()


def trim(traj: Trajectory, ratio: float, from_origin: bool) -> Trajectory:
    k = round_half_up(ratio * len(traj))
    if k == 0:
        return traj
    if from_origin:
        return replace(traj, roads=traj.roads[k:], times=traj.times[k:])
    return replace(traj, roads=traj.roads[:-k], times=traj.times[:-k])


def shifted_gap(current: float, historical: float, r3: float) -> float:
    return current - (current - historical) * r3


def temporal_shift(traj: Trajectory, positions: Sequence[int], factors: Sequence[float],
                   hist: HistoricalTravelTimes) -> Trajectory:
    """Pull the travel time of the roads at ``positions`` toward their historical mean.

    Gaps are edited and timestamps re-accumulated from t_1, so times stay sorted.
    """
    gaps = np.diff(np.asarray(traj.times, dtype=np.float64))
    for pos, r3 in zip(positions, factors):
        gaps[pos] = max(0.0, shifted_gap(gaps[pos], hist[traj.roads[pos]], r3))
    times = traj.times[0] + np.concatenate([[0], np.cumsum(np.rint(gaps))]).astype(np.int64)
    return replace(traj, times=tuple(int(t) for t in times))


@dataclass
class AugmentConfig:
    trim_range: tuple = (0.05, 0.15)
    shift_fraction: float = 0.15
    shift_range: tuple = (0.15, 0.30)
    mask_ratio: float = 0.15
    mask_length: int = 2
    token_dropout: float = 0.1


def augment(traj: Trajectory, strategy: str, hist: HistoricalTravelTimes,
            rng: np.random.Generator, cfg: AugmentConfig | None = None) -> AugmentedView:
    cfg = cfg or AugmentConfig()
    n = len(traj)
    if strategy == "trim":
        ratio = rng.uniform(*cfg.trim_range)
        from_origin = bool(rng.random() < 0.5)
        if n - round_half_up(ratio * n) >= 2:
            return AugmentedView(trim(traj, ratio, from_origin), strategy)
        strategy = "dropout"
    if strategy == "temporal_shift":
        if n < 2:
            return AugmentedView(traj, strategy)
        m = max(1, round_half_up(cfg.shift_fraction * (n - 1)))
        pos = np.sort(rng.choice(n - 1, size=min(m, n - 1), replace=False))
        factors = rng.uniform(*cfg.shift_range, size=len(pos))
        return AugmentedView(temporal_shift(traj, pos, factors, hist), strategy)
    if strategy == "segment_mask":
        sample = span_mask(traj, cfg.mask_ratio, cfg.mask_length, rng)
        return AugmentedView(traj, strategy, masked=sample.positions)
    if strategy == "dropout":
        drop = np.flatnonzero(rng.random(n) < cfg.token_dropout)
        return AugmentedView(traj, strategy, dropped=tuple(int(p) for p in drop))
    raise ValueError(f"unknown augmentation {strategy!r}; choose from {STRATEGIES}")


def collate_views(views: Sequence[AugmentedView]) -> TrajectoryBatch:
    return TrajectoryBatch.from_trajectories(
        [v.trajectory for v in views], masks=[v.masked for v in views],
        drops=[v.dropped for v in views])


# ---------------------------------------------------------------------------
# contrastive loss


def nt_xent_loss(reps: torch.Tensor, tau: float, positives: torch.Tensor | None = None) -> torch.Tensor:
    """NT-Xent over 2N representations; by default row i pairs with row (i + N) mod 2N."""
    m = reps.shape[0]
    if m < 4 or m % 2:
        raise ValueError("contrastive loss needs an even number of views from >= 2 trajectories")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if positives is None:
        positives = (torch.arange(m) + m // 2) % m
    z = F.normalize(reps, dim=1)
    sim = (z @ z.T) / tau
    sim = sim.masked_fill(torch.eye(m, dtype=torch.bool), -torch.inf)
    return F.cross_entropy(sim, positives)


# ---------------------------------------------------------------------------
# training


@dataclass
class PretrainConfig:
    lam: float = 0.6
    tau: float = 0.05
    batch_size: int = 64
    epochs: int = 30
    lr: float = 2e-4
    warmup_epochs: int = 5
    weight_decay: float = 0.01
    augment: tuple = ("trim", "temporal_shift")
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def validate(self):
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        for s in self.augment:
            if s not in STRATEGIES:
                raise ValueError(f"unknown augmentation {s!r}")


class Pretrainer(nn.Module):
    """Encoder plus the |V|-way recovery head used only during pretraining."""

    def __init__(self, model: StartModel, num_roads: int):
        super().__init__()
        self.model = model
        self.mask_head = nn.Linear(model.d, num_roads)


def warmup_cosine(step: int, warmup_steps: int, total_steps: int) -> float:
    """Learning-rate multiplier: linear ramp, then cosine decay to zero."""
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, (step - warmup_steps) / span)))


def pretrain_loss(pt: Pretrainer, graph: RoadGraph, masked: TrajectoryBatch,
                  views: TrajectoryBatch, lam: float, tau: float):
    """Combined objective; returns (total, mask part, contrastive part)."""
    road_emb = pt.model.road_embeddings(graph)
    z, _ = pt.model(masked, road_emb=road_emb)
    logits, targets, owner = masked_logits(z, masked, pt.mask_head)
    l_mask = masked_recovery_loss(logits, targets, owner, masked.size)
    _, p = pt.model(views, road_emb=road_emb)
    l_con = nt_xent_loss(p, tau)
    return lam * l_mask + (1 - lam) * l_con, l_mask, l_con


def build_step_batches(trajs: Sequence[Trajectory], cfg: PretrainConfig,
                       hist: HistoricalTravelTimes, epoch: int):
    samples = [span_mask(t, cfg.augment_cfg.mask_ratio, cfg.augment_cfg.mask_length,
                         item_rng(cfg.seed, _MASK, epoch, t.traj_id)) for t in trajs]
    masked = TrajectoryBatch.from_trajectories(trajs, masks=[s.positions for s in samples])
    a, b = cfg.augment[0], cfg.augment[-1]
    views = ([augment(t, a, hist, item_rng(cfg.seed, _AUG_A, epoch, t.traj_id), cfg.augment_cfg)
              for t in trajs]
             + [augment(t, b, hist, item_rng(cfg.seed, _AUG_B, epoch, t.traj_id), cfg.augment_cfg)
                for t in trajs])
    return masked, collate_views(views)


@dataclass
class PretrainResult:
    pretrainer: Pretrainer
    optimizer: torch.optim.Optimizer
    history: list
    epochs_done: int


def make_optimizer(params, lr: float, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def run_pretraining(train: Sequence[Trajectory], graph: RoadGraph, hist: HistoricalTravelTimes,
                    cfg: PretrainConfig, model: StartModel | None = None,
                    eval_fn=None, stop_after: int | None = None) -> PretrainResult:
    """Jointly train graph encoder, temporal tables, encoder and recovery head.

    ``eval_fn(pretrainer, epoch)`` may return a dict merged into the epoch log.
    ``stop_after`` ends the run early without changing the learning-rate schedule.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    if model is None:
        model = StartModel()
    pt = Pretrainer(model, graph.num_roads)
    opt = make_optimizer(pt.parameters(), cfg.lr, cfg.weight_decay)
    train = list(train)
    bs = min(cfg.batch_size, len(train))
    if bs < 2:
        raise ValueError("need at least two training trajectories")
    steps_per_epoch = len(train) // bs
    total = steps_per_epoch * cfg.epochs
    warm = steps_per_epoch * cfg.warmup_epochs
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: warmup_cosine(s, warm, total))
    history = []
    step = 0
    n_epochs = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(n_epochs):
        pt.train()
        order = np.random.default_rng([cfg.seed, _SHUFFLE, epoch]).permutation(len(train))
        sums = np.zeros(3)
        for k in range(steps_per_epoch):
            chunk = [train[i] for i in order[k * bs:(k + 1) * bs]]
            masked, views = build_step_batches(chunk, cfg, hist, epoch)
            loss, l_mask, l_con = pretrain_loss(pt, graph, masked, views, cfg.lam, cfg.tau)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            sums += [loss.item(), l_mask.item(), l_con.item()]
        mean = (sums / steps_per_epoch).tolist()
        row = {"epoch": epoch + 1, "loss": mean[0], "mask_loss": mean[1], "con_loss": mean[2]}
        if eval_fn is not None:
            row.update(eval_fn(pt, epoch))
        log.info("pretrain %s", row)
        history.append(row)
    return PretrainResult(pt, opt, history, n_epochs)


@torch.no_grad()
def masked_accuracy(pt: Pretrainer, graph: RoadGraph, trajs: Sequence[Trajectory],
                    cfg: AugmentConfig | None = None, seed: int = 0, batch_size: int = 256) -> float:
    """Fraction of span-masked roads recovered exactly (argmax of the head)."""
    cfg = cfg or AugmentConfig()
    was_training = pt.training
    pt.eval()
    road_emb = pt.model.road_embeddings(graph)
    hits = total = 0
    for k in range(0, len(trajs), batch_size):
        chunk = trajs[k:k + batch_size]
        samples = [span_mask(t, cfg.mask_ratio, cfg.mask_length, item_rng(seed, _EVAL, 0, t.traj_id))
                   for t in chunk]
        batch = TrajectoryBatch.from_trajectories(chunk, masks=[s.positions for s in samples])
        z, _ = pt.model(batch, road_emb=road_emb)
        logits, targets, _ = masked_logits(z, batch, pt.mask_head)
        hits += int((logits.argmax(-1) == targets).sum())
        total += targets.numel()
    pt.train(was_training)
    return hits / max(total, 1)
