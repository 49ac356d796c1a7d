"""Fine-tuning heads for travel-time estimation and classification, plus their metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

from .model import StartModel
from .pretrain import make_optimizer, warmup_cosine
from .tat_enc import TrajectoryBatch
from .tpe_gat import RoadGraph
from .trajdata import Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TripQuery:
    """What an ETA request may see: the route and the departure time, nothing else."""

    roads: tuple
    departure: int

    @classmethod
    def of(cls, traj: Trajectory) -> "TripQuery":
        return cls(tuple(traj.roads), int(traj.times[0]))

    def as_trajectory(self) -> Trajectory:
        return Trajectory("query", "", self.roads, [self.departure] * len(self.roads))


@dataclass
class FinetuneConfig:
    lr: float = 2e-4
    epochs: int = 30
    batch_size: int = 64
    warmup_epochs: int = 5
    weight_decay: float = 0.01
    seed: int = 0


class EtaModel(nn.Module):
    """Encoder + single affine layer on the trajectory vector, output in seconds."""

    def __init__(self, encoder: StartModel, target_mean: float = 0.0, target_std: float = 1.0):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.d, 1)
        self.register_buffer("target_mean", torch.tensor(float(target_mean)))
        self.register_buffer("target_std", torch.tensor(float(target_std)))

    def forward(self, batch: TrajectoryBatch, graph: RoadGraph) -> torch.Tensor:
        """Standardised prediction; multiply by std and add mean for seconds."""
        _, p = self.encoder(batch, graph)
        return self.head(p).squeeze(-1)


class ClassifierModel(nn.Module):
    def __init__(self, encoder: StartModel, num_classes: int):
        super().__init__()
        self.encoder = encoder
        self.num_classes = num_classes
        self.head = nn.Linear(encoder.d, num_classes)

    def forward(self, batch: TrajectoryBatch, graph: RoadGraph) -> torch.Tensor:
        """Unnormalised class scores; softmax gives the distribution."""
        _, p = self.encoder(batch, graph)
        return self.head(p)


def eta_batch(queries: Sequence[TripQuery]) -> TrajectoryBatch:
    for q in queries:
        if len(q.roads) < 2:
            raise ValueError("ETA needs a route of at least two roads")
    return TrajectoryBatch.from_trajectories([q.as_trajectory() for q in queries])


def _fit(module: nn.Module, n_items: int, make_batch, loss_fn, cfg: FinetuneConfig, tag: str):
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(module.parameters(), cfg.lr, cfg.weight_decay)
    bs = max(1, min(cfg.batch_size, n_items))
    steps = max(1, n_items // bs)
    total, warm = steps * cfg.epochs, steps * cfg.warmup_epochs
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: warmup_cosine(s, warm, total))
    history = []
    for epoch in range(cfg.epochs):
        module.train()
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(n_items)
        running = 0.0
        for k in range(steps):
            loss = loss_fn(*make_batch(order[k * bs:(k + 1) * bs]))
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite {tag} loss at epoch {epoch} step {k}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item()
        history.append({"epoch": epoch + 1, "loss": running / steps})
        log.info("%s %s", tag, history[-1])
    module.eval()
    return history


def finetune_eta(encoder: StartModel, train: Sequence[Trajectory], graph: RoadGraph,
                 cfg: FinetuneConfig):
    """Fit encoder and regression head on trip durations with an MSE objective."""
    queries = [TripQuery.of(t) for t in train]
    y = np.array([t.duration for t in train], dtype=np.float64)
    model = EtaModel(encoder, y.mean(), y.std() or 1.0)
    target = torch.tensor((y - y.mean()) / (y.std() or 1.0), dtype=torch.get_default_dtype())

    def make(idx):
        return eta_batch([queries[i] for i in idx]), target[torch.as_tensor(idx)]

    def loss_fn(batch, yb):
        return F.mse_loss(model(batch, graph), yb)

    history = _fit(model, len(queries), make, loss_fn, cfg, "finetune-eta")
    return model, history


@torch.no_grad()
def predict_eta(model: EtaModel, queries: Sequence[TripQuery], graph: RoadGraph,
                batch_size: int = 256) -> np.ndarray:
    model.eval()
    road_emb = model.encoder.road_embeddings(graph)
    out = []
    for k in range(0, len(queries), batch_size):
        _, p = model.encoder(eta_batch(queries[k:k + batch_size]), road_emb=road_emb)
        out.append(model.head(p).squeeze(-1) * model.target_std + model.target_mean)
    return torch.cat(out).double().numpy()


def finetune_classify(encoder: StartModel, train: Sequence[Trajectory], labels: Sequence[int],
                      num_classes: int, graph: RoadGraph, cfg: FinetuneConfig):
    labels = np.asarray(labels, dtype=np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if len(bad):
        raise ValueError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {num_classes})")
    model = ClassifierModel(encoder, num_classes)
    target = torch.as_tensor(labels)
    train = list(train)

    def make(idx):
        return TrajectoryBatch.from_trajectories([train[i] for i in idx]), target[torch.as_tensor(idx)]

    def loss_fn(batch, yb):
        return F.cross_entropy(model(batch, graph), yb)

    history = _fit(model, len(train), make, loss_fn, cfg, "finetune-classify")
    return model, history


@torch.no_grad()
def classify(model: ClassifierModel, trajs: Sequence[Trajectory], graph: RoadGraph,
             batch_size: int = 256) -> np.ndarray:
    """Class distributions, shape (N, C)."""
    model.eval()
    road_emb = model.encoder.road_embeddings(graph)
    out = []
    for k in range(0, len(trajs), batch_size):
        _, p = model.encoder(TrajectoryBatch.from_trajectories(trajs[k:k + batch_size]),
                             road_emb=road_emb)
        out.append(torch.softmax(model.head(p), dim=-1))
    return torch.cat(out).double().numpy()


@torch.no_grad()
def embed(encoder: StartModel, trajs: Sequence[Trajectory], graph: RoadGraph,
          batch_size: int = 256) -> np.ndarray:
    """Trajectory vectors p for a corpus, in input order."""
    was = encoder.training
    encoder.eval()
    road_emb = encoder.road_embeddings(graph)
    out = []
    for k in range(0, len(trajs), batch_size):
        _, p = encoder(TrajectoryBatch.from_trajectories(trajs[k:k + batch_size]), road_emb=road_emb)
        out.append(p)
    encoder.train(was)
    return torch.cat(out).double().numpy()


# ---------------------------------------------------------------------------
# metrics


def regression_metrics(y, y_hat) -> dict:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError("targets and predictions differ in length")
    zero = np.flatnonzero(y == 0)
    if len(zero):
        raise ValueError(f"MAPE undefined: target at index {zero[0]} is zero")
    err = y_hat - y
    return {"MAE": float(np.abs(err).mean()),
            "MAPE": float(np.abs(err / y).mean() * 100.0),
            "RMSE": float(np.sqrt((err ** 2).mean()))}


def roc_auc(y, scores) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    y = np.asarray(y).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _f1(y, pred, cls) -> float:
    tp = int(((pred == cls) & (y == cls)).sum())
    fp = int(((pred == cls) & (y != cls)).sum())
    fn = int(((pred != cls) & (y == cls)).sum())
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def classification_metrics(y, probs, ks: Sequence[int] = (5,)) -> dict:
    """Binary: ACC/F1/AUC. Multi-class: Micro-F1/Macro-F1/Recall@k."""
    y = np.asarray(y, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    pred = probs.argmax(1)
    if probs.shape[1] == 2:
        return {"ACC": float((pred == y).mean()), "F1": _f1(y, pred, 1),
                "AUC": roc_auc(y, probs[:, 1])}
    out = {"Micro-F1": float((pred == y).mean()),
           "Macro-F1": float(np.mean([_f1(y, pred, c) for c in np.unique(y)]))}
    order = np.argsort(-probs, axis=1, kind="stable")
    for k in ks:
        out[f"Recall@{k}"] = float((order[:, :k] == y[:, None]).any(1).mean())
    return out


@dataclass
class MetricsReport:
    task: str
    metrics: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.metrics = {k: float(v) for k, v in self.metrics.items()}

    def to_text(self) -> str:
        lines = [f"task={self.task}"]
        lines += [f"{k}={self.metrics[k]!r}" for k in sorted(self.metrics)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "metrics": self.metrics, **self.extra},
                          sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        rows = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        task = rows.pop("task", "")
        return cls(task, {k: float(v) for k, v in rows.items()})

    def write(self, stem) -> None:
        stem = Path(stem)
        stem.with_suffix(".txt").write_text(self.to_text())
        stem.with_suffix(".json").write_text(self.to_json())
