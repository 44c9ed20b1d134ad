"""Patch encoder: a unified-size patch to an ``m``-dimensional visual embedding."""
from __future__ import annotations

import torch
import torch.nn as nn

from .coarse import init_conv_


class PatchEncoder(nn.Module):
    """Four stride-2 blocks (conv 4x4x4, batch norm, ReLU) and a global mean pool.

    With the default widths a ``32^3`` patch shrinks 32 -> 16 -> 8 -> 4 -> 2
    and the output is a 512-vector.
    """

    def __init__(self, widths=(64, 128, 256, 512), patch_size=32, seed=None):
        super().__init__()
        self.widths = tuple(widths)
        self.patch_size = patch_size
        layers = []
        c_in = 1
        for c_out in self.widths:
            layers.append(
                nn.Sequential(
                    nn.Conv3d(c_in, c_out, kernel_size=4, stride=2, padding=1),
                    nn.BatchNorm3d(c_out),
                    nn.ReLU(inplace=True),
                )
            )
            c_in = c_out
        self.blocks = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        init_conv_(self, gen)

    @property
    def out_dim(self):
        return self.widths[-1]

    def forward(self, patches, return_maps=False):
        """``patches`` is ``(N, 1, s, s, s)`` or ``(N, s, s, s)``."""
        if patches.ndim == 4:
            patches = patches[:, None]
        if tuple(patches.shape[2:]) != (self.patch_size,) * 3:
            raise ValueError(
                f"encoder expects {self.patch_size}^3 patches, got {tuple(patches.shape[2:])}"
            )
        maps = []
        x = patches
        for block in self.blocks:
            x = block(x)
            maps.append(x)
        emb = x.mean(dim=(2, 3, 4))
        return (emb, maps) if return_maps else emb


def encode_patch(encoder: PatchEncoder, patch) -> torch.Tensor:
    """Embed a single ``Patch`` in inference mode."""
    param = next(encoder.parameters())
    x = torch.as_tensor(patch.data, dtype=param.dtype)[None, None]
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            return encoder(x)[0]
    finally:
        encoder.train(was_training)
