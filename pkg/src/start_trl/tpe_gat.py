"""Graph attention over the road network with a transfer-probability term in the logits.

Attention runs over sparse neighbourhoods ``N_i = successors(i) | {i}``; nothing
of size |V| x |V| is ever materialised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F

from .roadnet import RoadNetwork, encode_road_features

LEAKY_SLOPE = 0.2


@dataclass
class RoadGraph:
    """Tensor view of a road network: features plus neighbourhood edge lists."""

    features: torch.Tensor  # (V, d0)
    center: torch.Tensor  # (E',) road i owning the neighbourhood
    neighbor: torch.Tensor  # (E',) j in N_i
    transfer: torch.Tensor  # (E',) p_trans[i, j]; 0 on self pairs

    @property
    def num_roads(self) -> int:
        return self.features.shape[0]

    def to(self, dtype) -> "RoadGraph":
        return RoadGraph(self.features.to(dtype), self.center, self.neighbor, self.transfer.to(dtype))

    def without_transfer(self) -> "RoadGraph":
        return RoadGraph(self.features, self.center, self.neighbor, torch.zeros_like(self.transfer))

    @classmethod
    def build(cls, network: RoadNetwork, transfer: sp.spmatrix | None = None,
              dtype=torch.float32) -> "RoadGraph":
        n = network.num_roads
        loops = np.arange(n)
        center = np.concatenate([network.edges[:, 0], loops])
        neighbor = np.concatenate([network.edges[:, 1], loops])
        order = np.lexsort((neighbor, center))
        center, neighbor = center[order], neighbor[order]
        if transfer is None:
            probs = np.zeros(len(center))
        else:
            probs = np.asarray(sp.csr_matrix(transfer)[center, neighbor]).ravel()
            probs[center == neighbor] = 0.0
        return cls(
            torch.as_tensor(encode_road_features(network), dtype=dtype),
            torch.as_tensor(center, dtype=torch.long),
            torch.as_tensor(neighbor, dtype=torch.long),
            torch.as_tensor(probs, dtype=dtype),
        )


def glorot_(t: torch.Tensor, fan_in: int, fan_out: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return t.uniform_(-bound, bound)


def segment_softmax(logits: torch.Tensor, segment: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of ``logits`` (E, H) within groups of rows sharing ``segment``."""
    idx = segment[:, None].expand_as(logits)
    # the shift only guards exp() against overflow; softmax is shift invariant
    shift = torch.full((num_segments, logits.shape[1]), -torch.inf, dtype=logits.dtype)
    shift = shift.scatter_reduce(0, idx, logits.detach(), reduce="amax", include_self=True)
    ex = torch.exp(logits - shift[segment])
    denom = torch.zeros_like(shift).index_add(0, segment, ex)
    return ex / denom[segment]


class TpeGatLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, heads: int):
        super().__init__()
        self.d_in, self.d_out, self.heads = d_in, d_out, heads
        self.W1 = nn.Parameter(torch.empty(heads, d_in, d_out))
        self.W2 = nn.Parameter(torch.empty(heads, d_in, d_out))
        self.W3 = nn.Parameter(torch.empty(heads, d_out))
        self.W4 = nn.Parameter(torch.empty(heads, d_out))
        self.W5 = nn.Parameter(torch.empty(heads, d_in, d_out))
        for w in (self.W1, self.W2, self.W5):
            glorot_(w, d_in, d_out)
        for w in (self.W3, self.W4):
            glorot_(w, 1, d_out)

    @property
    def out_dim(self) -> int:
        return self.heads * self.d_out

    def attention(self, h: torch.Tensor, graph: RoadGraph) -> torch.Tensor:
        """Attention weights alpha (E', H) aligned with ``graph.center/neighbor``."""
        if h.shape[-1] != self.d_in:
            raise ValueError(f"expected input width {self.d_in}, got {h.shape[-1]}")
        src = torch.einsum("vd,hdo->vho", h, self.W1)
        dst = torch.einsum("vd,hdo->vho", h, self.W2)
        inner = (src[graph.center] + dst[graph.neighbor]
                 + graph.transfer[:, None, None] * self.W3[None])
        e = (inner * self.W4[None]).sum(-1)
        return segment_softmax(F.leaky_relu(e, LEAKY_SLOPE), graph.center, h.shape[0])

    def aggregate(self, h: torch.Tensor, alpha: torch.Tensor, graph: RoadGraph) -> torch.Tensor:
        msg = torch.einsum("vd,hdo->vho", h, self.W5)[graph.neighbor] * alpha[..., None]
        out = torch.zeros(h.shape[0], self.heads, self.d_out, dtype=h.dtype)
        out = out.index_add(0, graph.center, msg)
        return F.elu(out).reshape(h.shape[0], self.out_dim)

    def forward(self, h: torch.Tensor, graph: RoadGraph) -> torch.Tensor:
        return self.aggregate(h, self.attention(h, graph), graph)


class TpeGat(nn.Module):
    """Stack of :class:`TpeGatLayer`; the last layer must have a single head.

    Parameter shapes depend only on ``in_dim``, ``heads`` and ``head_dims``, so
    one set of weights encodes any road network with the same feature layout.
    """

    def __init__(self, in_dim: int, heads=(8, 16, 1), head_dims=(8, 4, 64)):
        super().__init__()
        if len(heads) != len(head_dims) or not heads:
            raise ValueError("heads and head_dims must be non-empty and equally long")
        if heads[-1] != 1:
            raise ValueError("the final TPE-GAT layer must have exactly one head")
        layers, width = [], in_dim
        for h, w in zip(heads, head_dims):
            layers.append(TpeGatLayer(width, w, h))
            width = h * w
        self.layers = nn.ModuleList(layers)
        self.in_dim = in_dim
        self.out_dim = width

    def forward(self, graph: RoadGraph) -> torch.Tensor:
        h = graph.features
        if h.shape[1] != self.in_dim:
            raise ValueError(f"road features have width {h.shape[1]}, model expects {self.in_dim}")
        for layer in self.layers:
            h = layer(h, graph)
        return h


def encode_roads(graph: RoadGraph, gat: TpeGat) -> torch.Tensor:
    return gat(graph)
