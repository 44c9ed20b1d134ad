"""Graph attention over the landmark configuration.

Each node couples a landmark's normalised position with the coarse feature
vector found at that position.  Every node attends to every node (self
included) and the attended value is added back to its feature vector.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .coarse import init_conv_

GAM_NORMS = ("softmax", "raw-eps")
RAW_EPS = 1e-6


def sample_node_features(feature_map: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Trilinearly sample a ``(d, X, Y, Z)`` map at ``(n, 3)`` grid positions.

    Positions are clamped into the grid first. Differentiable in both inputs.
    """
    d = feature_map.shape[0]
    dims = feature_map.shape[1:]
    hi = torch.tensor([s - 1 for s in dims], dtype=positions.dtype)
    p = torch.minimum(torch.clamp(positions, min=0.0), hi)
    base = torch.floor(p).detach()
    base = torch.minimum(base, torch.clamp(hi - 1, min=0.0))
    frac = p - base
    base = base.long()
    flat = feature_map.reshape(d, -1)
    strides = (dims[1] * dims[2], dims[2], 1)
    out = 0
    for corner in range(8):
        offs = [(corner >> (2 - a)) & 1 for a in range(3)]
        weight = 1
        index = 0
        for a in range(3):
            idx = torch.clamp(base[:, a] + offs[a], max=dims[a] - 1)
            index = index + idx * strides[a]
            weight = weight * (frac[:, a] if offs[a] else 1 - frac[:, a])
        out = out + flat[:, index].T * weight[:, None]
    return out


class GraphAttention(nn.Module):
    """Key/query/value maps shared by all landmarks, ``(3 + d) -> d`` each."""

    def __init__(self, d=64, norm="softmax", seed=None):
        super().__init__()
        if norm not in GAM_NORMS:
            raise ValueError(f"gam norm must be one of {GAM_NORMS}, got {norm!r}")
        self.d = d
        self.norm = norm
        self.theta = nn.Linear(3 + d, d)
        self.phi = nn.Linear(3 + d, d)
        self.g = nn.Linear(3 + d, d)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        init_conv_(self, gen)

    def attention(self, nodes: torch.Tensor) -> torch.Tensor:
        scores = self.theta(nodes) @ self.phi(nodes).T
        if self.norm == "softmax":
            return torch.softmax(scores / math.sqrt(self.d), dim=1)
        total = scores.sum(dim=1, keepdim=True)
        total = torch.where(total.abs() < RAW_EPS, torch.full_like(total, RAW_EPS), total)
        return scores / total

    def forward(self, positions: torch.Tensor, features: torch.Tensor, return_attention=False):
        """``positions`` ``(n, 3)`` normalised to ~[0, 1]; ``features`` ``(n, d)``."""
        if positions.shape[0] < 1:
            raise ValueError("graph needs at least one node")
        nodes = torch.cat([positions, features], dim=1)
        attn = self.attention(nodes)
        out = features + attn @ self.g(nodes)
        return (out, attn) if return_attention else out


def structure_embedding(gam: GraphAttention, positions, features):
    return gam(positions, features)
