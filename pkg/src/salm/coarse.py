"""First stage: heatmap regression on the down-sampled volume and integral decoding."""
from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

INTEGRAL_EPS = 1e-8


def init_conv_(module: nn.Module, generator: torch.Generator | None = None):
    """Fan-in scaled uniform weights, zero biases, for every conv/linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, 3, padding=1),
        nn.BatchNorm3d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv3d(c_out, c_out, 3, padding=1),
        nn.BatchNorm3d(c_out),
        nn.ReLU(inplace=True),
    )


class CoarseNet(nn.Module):
    """U-shaped heatmap regressor with ``levels`` pooling stages.

    Returns ``(heatmaps, features)`` where ``heatmaps`` has shape
    ``(B, n, X, Y, Z)`` and ``features`` (the coarse feature map used by the
    graph attention stage) has shape ``(B, d, X, Y, Z)``.
    """

    def __init__(self, n_landmarks, d=64, levels=3, seed=None, head_bias=0.0):
        super().__init__()
        self.n_landmarks = n_landmarks
        self.d = d
        self.levels = levels
        self.down = nn.ModuleList([conv_block(1 if i == 0 else d, d) for i in range(levels)])
        self.bottom = conv_block(d, d)
        self.up = nn.ModuleList([conv_block(2 * d, d) for _ in range(levels)])
        self.head = nn.Conv3d(d, n_landmarks, 1)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        init_conv_(self, gen)
        # a negative start keeps the sigmoid background near zero from step one
        nn.init.constant_(self.head.bias, head_bias)

    def forward(self, x):
        if not torch.all(torch.isfinite(x)):
            raise ValueError("non-finite input to coarse network")
        dims = x.shape[2:]
        mult = 2 ** self.levels
        pad = [(-s) % mult for s in dims]
        if any(pad):
            # F.pad takes the last axis first
            x = F.pad(x, (0, pad[2], 0, pad[1], 0, pad[0]))
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool3d(x, 2)
        x = self.bottom(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = F.interpolate(x, size=skip.shape[2:], mode="trilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        heatmaps = torch.sigmoid(self.head(x))
        sl = (Ellipsis, slice(0, dims[0]), slice(0, dims[1]), slice(0, dims[2]))
        return heatmaps[sl], x[sl]


def forward_coarse(net: CoarseNet, volume_ds):
    """Run the coarse network on a down-sampled volume (``Volume`` or array).

    Returns heatmaps ``(n, X, Y, Z)`` and feature map ``(d, X, Y, Z)``.
    """
    data = getattr(volume_ds, "data", volume_ds)
    param = next(net.parameters())
    x = torch.as_tensor(np.asarray(data), dtype=param.dtype)[None, None]
    heatmaps, features = net(x)
    return heatmaps[0], features[0]


def grid_coords(dims, dtype=torch.float64):
    axes = [torch.arange(s, dtype=dtype) for s in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)


def make_heatmap_target(g_ds, dims, sigma_h=2.0, dtype=torch.float64):
    """Gaussian target(s) peaking at 1 on ``g_ds`` (``(3,)`` or ``(n, 3)``)."""
    if sigma_h <= 0:
        raise ValueError(f"sigma_h must be positive, got {sigma_h}")
    g = torch.as_tensor(np.asarray(g_ds, dtype=np.float64), dtype=dtype)
    if not torch.all(torch.isfinite(g)):
        raise ValueError("target position must be finite")
    single = g.ndim == 1
    g = g.reshape(-1, 3)
    rho = grid_coords(dims, dtype)
    d2 = ((rho[None] - g[:, None, None, None, :]) ** 2).sum(-1)
    maps = torch.exp(-d2 / (2 * sigma_h**2))
    return maps[0] if single else maps


def integral_landmark(h: torch.Tensor) -> torch.Tensor:
    """Heatmap centroid in grid coordinates.

    ``h`` has shape ``(..., X, Y, Z)``; the result has shape ``(..., 3)``.
    """
    if torch.any(h < 0):
        raise ValueError("heatmap must be non-negative")
    dims = h.shape[-3:]
    total = h.sum(dim=(-3, -2, -1))
    if torch.any(total <= 0):
        log.warning("degenerate all-zero heatmap; centroid falls back to the origin")
    gamma = total + INTEGRAL_EPS
    out = []
    for axis in range(3):
        # marginalise the other two axes, then take a 1D weighted mean
        others = tuple(a for a in (-3, -2, -1) if a != axis - 3)
        marginal = h.sum(dim=others)
        coords = torch.arange(dims[axis], dtype=h.dtype, device=h.device)
        out.append((marginal * coords).sum(-1) / gamma)
    return torch.stack(out, dim=-1)


def heatmap_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum of absolute voxel differences over all maps."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().sum()
