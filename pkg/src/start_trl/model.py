"""The full trajectory encoder: road graph encoder feeding the time-aware encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .roadnet import NUM_ROAD_TYPES, NUMERIC_COLUMNS
from .tat_enc import Ablation, TatEncoder, TrajectoryBatch
from .tpe_gat import RoadGraph, TpeGat

FEATURE_DIM = NUM_ROAD_TYPES + len(NUMERIC_COLUMNS)


@dataclass
class ModelConfig:
    d: int = 64
    gat_heads: list = field(default_factory=lambda: [8, 16, 1])
    gat_head_dims: list = field(default_factory=lambda: [8, 4, 64])
    layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    interval_hidden: int = 8

    def validate(self):
        if self.gat_head_dims[-1] != self.d or self.gat_heads[-1] != 1:
            raise ValueError("final TPE-GAT layer must have one head of width d")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")


class StartModel(nn.Module):
    """Maps (road graph, trajectory batch) to per-token outputs and trajectory vectors.

    Holds no parameter whose shape depends on the number of roads.
    """

    def __init__(self, config: ModelConfig | None = None, ablation: Ablation | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.config.validate()
        self.ablation = ablation or Ablation()
        c = self.config
        self.gat = TpeGat(FEATURE_DIM, c.gat_heads, c.gat_head_dims)
        self.encoder = TatEncoder(c.d, c.layers, c.heads, c.dropout, c.interval_hidden)

    @property
    def d(self) -> int:
        return self.config.d

    def road_embeddings(self, graph: RoadGraph) -> torch.Tensor:
        if not self.ablation.trans_prob:
            graph = graph.without_transfer()
        return self.gat(graph)

    def forward(self, batch: TrajectoryBatch, graph: RoadGraph | None = None,
                road_emb: torch.Tensor | None = None):
        """Return (Z, p). Pass ``road_emb`` to reuse road vectors across batches of a step."""
        if road_emb is None:
            road_emb = self.road_embeddings(graph)
        return self.encoder(batch, road_emb, self.ablation)
