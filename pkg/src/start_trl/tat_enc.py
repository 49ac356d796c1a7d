"""Time-aware trajectory encoder.

Token layout of a batch row: position 0 is the [CLS] placeholder whose output
is the trajectory representation, positions 1..|T| are the roads, then [PAD].
Special tokens use negative ids so batches do not depend on the road count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .trajdata import Trajectory, day_of_week_index, minute_index

CLS, MASK, PAD = -1, -2, -3
MASKT = 0  # temporal-table row shared by [MASKT] and padding
NUM_MINUTES = 1440
NUM_DAYS = 7
LEAKY_SLOPE = 0.2
INVERSE_CAP = 1e6


@dataclass
class Ablation:
    """Runtime switches for the encoder variants (all on = full model)."""

    trans_prob: bool = True
    time_emb: bool = True
    time_interval: bool = True
    interval: str = "time"  # "time" | "hop"
    decay: str = "log"  # "log" | "inverse"
    adaptive: bool = True

    def __post_init__(self):
        if self.interval not in ("time", "hop"):
            raise ValueError(f"interval must be 'time' or 'hop', got {self.interval!r}")
        if self.decay not in ("log", "inverse"):
            raise ValueError(f"decay must be 'log' or 'inverse', got {self.decay!r}")


@dataclass
class TrajectoryBatch:
    tokens: torch.Tensor  # (B, L+1) long
    minutes: torch.Tensor  # (B, L+1) long, 0 = [MASKT]/pad
    days: torch.Tensor  # (B, L+1) long
    times: torch.Tensor  # (B, L+1) int64 seconds, CLS anchored at t_1
    pad: torch.Tensor  # (B, L+1) bool, True on padding
    drop: torch.Tensor  # (B, L+1) bool, tokens zeroed by the dropout augmentation
    masked: torch.Tensor = field(default=None)  # (B, L+1) bool, span-masked positions
    targets: torch.Tensor = field(default=None)  # (B, L+1) long, true road where masked else -100

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], masks=None, drops=None,
                          departure_only: bool = False, pad_to: int | None = None):
        """Collate trajectories.

        ``masks``: per trajectory, iterable of 0-based road positions to replace by
        [MASK]/[MASKT]. ``drops``: per trajectory, 0-based positions zeroed at the
        embedding layer. ``departure_only`` stamps every position with t_1.
        """
        b = len(trajs)
        width = max(len(t) for t in trajs) + 1
        if pad_to is not None:
            width = max(width, pad_to + 1)
        tokens = np.full((b, width), PAD, dtype=np.int64)
        times = np.zeros((b, width), dtype=np.int64)
        pad = np.ones((b, width), dtype=bool)
        masked = np.zeros((b, width), dtype=bool)
        drop = np.zeros((b, width), dtype=bool)
        targets = np.full((b, width), -100, dtype=np.int64)
        for k, t in enumerate(trajs):
            n = len(t)
            tokens[k, 0] = CLS
            tokens[k, 1:n + 1] = t.roads
            ts = np.asarray(t.times, dtype=np.int64)
            if departure_only:
                ts = np.full(n, ts[0])
            times[k, 0] = ts[0]
            times[k, 1:n + 1] = ts
            times[k, n + 1:] = ts[0]
            pad[k, :n + 1] = False
            if masks is not None:
                for pos in masks[k]:
                    masked[k, pos + 1] = True
                    targets[k, pos + 1] = t.roads[pos]
            if drops is not None:
                for pos in drops[k]:
                    drop[k, pos + 1] = True
        minutes = np.where(pad | masked, MASKT, minute_index(times))
        days = np.where(pad | masked, MASKT, day_of_week_index(times))
        tokens = np.where(masked, MASK, tokens)
        as_t = torch.from_numpy
        return cls(as_t(tokens), as_t(minutes), as_t(days), as_t(times), as_t(pad), as_t(drop),
                   as_t(masked), as_t(targets))

    def permute(self, order) -> "TrajectoryBatch":
        order = torch.as_tensor(order)
        return TrajectoryBatch(**{k: v[order] for k, v in self.__dict__.items()})


def sinusoidal_table(num_positions: int, d: int, period: float | None = None) -> torch.Tensor:
    """Standard Transformer sin/cos table. With ``period`` the angles wrap around it."""
    pos = torch.arange(num_positions, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    if period is None:
        angle = pos / torch.pow(10000.0, i / d)
    else:
        angle = 2 * math.pi * pos * (i / 2 + 1) / period
    table = torch.zeros(num_positions, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table


def decay(delta: torch.Tensor, mode: str = "log") -> torch.Tensor:
    if mode == "log":
        return 1.0 / torch.log(math.e + delta)
    # zero gaps map to the cap instead of infinity
    return 1.0 / delta.clamp(min=1.0 / INVERSE_CAP)


class TimeIntervalBias(nn.Module):
    """Pairwise attention bias from visit-time gaps: decay, then a two-step linear map."""

    def __init__(self, hidden: int = 8):
        super().__init__()
        self.omega1 = nn.Parameter(torch.empty(hidden))
        self.omega2 = nn.Parameter(torch.empty(hidden))
        nn.init.uniform_(self.omega1, -1.0, 1.0)
        nn.init.uniform_(self.omega2, -1.0, 1.0)

    def raw_interval(self, times: torch.Tensor, mode: str = "time") -> torch.Tensor:
        if mode == "hop":
            idx = torch.arange(times.shape[1])
            return (idx[:, None] - idx[None, :]).abs().expand(times.shape[0], -1, -1)
        # differences taken on integer seconds so constant shifts cancel exactly
        return (times[:, :, None] - times[:, None, :]).abs()

    def forward(self, times: torch.Tensor, ablation: Ablation | None = None) -> torch.Tensor:
        ablation = ablation or Ablation()
        delta = self.raw_interval(times, ablation.interval).to(self.omega1.dtype)
        d = decay(delta, ablation.decay)
        if not ablation.adaptive:
            return d
        return F.leaky_relu(d[..., None] * self.omega1, LEAKY_SLOPE) @ self.omega2


class TimeAwareAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        self.d, self.heads, self.dh = d, heads, d // heads
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)

    def weights(self, x, bias=None, pad=None):
        """Attention probabilities (B, H, L, L)."""
        b, n, _ = x.shape
        q = self.q(x).view(b, n, self.heads, self.dh).transpose(1, 2)
        k = self.k(x).view(b, n, self.heads, self.dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dh)
        if bias is not None:
            scores = scores + bias[:, None]
        if pad is not None:
            scores = scores.masked_fill(pad[:, None, None, :], -torch.inf)
        return torch.softmax(scores, dim=-1)

    def forward(self, x, bias=None, pad=None):
        b, n, _ = x.shape
        attn = self.weights(x, bias, pad)
        v = self.v(x).view(b, n, self.heads, self.dh).transpose(1, 2)
        out = (attn @ v).transpose(1, 2).reshape(b, n, self.d)
        return self.o(out)


class EncoderLayer(nn.Module):
    """Attention and feed-forward sublayers, each followed by residual + LayerNorm."""

    def __init__(self, d: int, heads: int, dropout: float = 0.1):
        super().__init__()
        self.attn = TimeAwareAttention(d, heads)
        self.ff1 = nn.Linear(d, d)
        self.ff2 = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, bias=None, pad=None):
        x = self.norm1(x + self.drop(self.attn(x, bias, pad)))
        return self.norm2(x + self.drop(self.ff2(F.relu(self.ff1(x)))))


class TatEncoder(nn.Module):
    """Embedding fusion, interval bias and the stack of encoder layers.

    Road vectors come from outside (the graph encoder), so this module holds no
    per-road parameters.
    """

    def __init__(self, d: int = 64, layers: int = 2, heads: int = 4, dropout: float = 0.1,
                 interval_hidden: int = 8, max_len: int = 130):
        super().__init__()
        self.d = d
        self.special = nn.Parameter(torch.randn(3, d))  # [CLS], [MASK], [PAD]
        self.minute_emb = nn.Embedding(NUM_MINUTES + 1, d)
        self.day_emb = nn.Embedding(NUM_DAYS + 1, d)
        with torch.no_grad():
            # periodic, smooth start so rarely seen minutes resemble their neighbours
            self.minute_emb.weight[1:] = sinusoidal_table(NUM_MINUTES, d, period=NUM_MINUTES).float()
            self.minute_emb.weight[0].normal_(0, 0.02)
        self.register_buffer("pe", sinusoidal_table(max_len, d).float(), persistent=False)
        self.interval = TimeIntervalBias(interval_hidden)
        self.layers = nn.ModuleList(EncoderLayer(d, heads, dropout) for _ in range(layers))
        self.drop = nn.Dropout(dropout)

    def fuse(self, batch: TrajectoryBatch, road_emb: torch.Tensor, ablation: Ablation) -> torch.Tensor:
        v = road_emb.shape[0]
        vocab = torch.cat([road_emb, self.special.to(road_emb.dtype)], dim=0)
        # CLS=-1 -> v, MASK=-2 -> v+1, PAD=-3 -> v+2
        idx = torch.where(batch.tokens < 0, v - 1 - batch.tokens, batch.tokens)
        x = vocab[idx]
        if ablation.time_emb:
            x = x + self.minute_emb(batch.minutes) + self.day_emb(batch.days)
        n = x.shape[1]
        if n > self.pe.shape[0]:
            raise ValueError(f"sequence of {n} tokens exceeds max_len {self.pe.shape[0]}")
        x = x + self.pe[:n].to(x.dtype)
        return x.masked_fill(batch.drop[..., None], 0.0)

    def interval_bias(self, batch: TrajectoryBatch, ablation: Ablation):
        if not ablation.time_interval:
            return None
        return self.interval(batch.times, ablation)

    def forward(self, batch: TrajectoryBatch, road_emb: torch.Tensor,
                ablation: Ablation | None = None):
        """Return (Z, p): per-token outputs and the [CLS] trajectory vectors."""
        ablation = ablation or Ablation()
        x = self.drop(self.fuse(batch, road_emb, ablation))
        bias = self.interval_bias(batch, ablation)
        for layer in self.layers:
            x = layer(x, bias, batch.pad)
        return x, x[:, 0]
