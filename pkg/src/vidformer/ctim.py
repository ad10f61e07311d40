"""Bridges between the two branches.

TransConvBridge turns tokens into a convolutional feature for the next conv
stage; ConvTransBridge turns a conv feature into tokens for the transformer.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError
from .global_branch import Grid


def tokens_to_volume(x_t: torch.Tensor, grid: Grid) -> torch.Tensor:
    """(B, P, D) -> (B, D, nt, nh, nw); D becomes the channel axis."""
    b, p, d = x_t.shape
    if grid[0] * grid[1] * grid[2] != p:
        raise ValueError(f"grid {grid} inconsistent with {p} tokens")
    return x_t.transpose(1, 2).reshape(b, d, *grid)


def _linear_resize_matrix(n_in: int, n_out: int) -> torch.Tensor:
    """(n_out, n_in) weights of 1-D linear resizing with half-pixel centres."""
    eye = torch.eye(n_in, dtype=torch.float64)[None]
    return F.interpolate(eye, size=n_out, mode="linear", align_corners=False)[0].T.contiguous()


class TransConvBridge(nn.Module):
    """Reshape tokens to a volume, upsample trilinearly to the target size, project D -> C with a 1x1x1 conv.

    Trilinear resizing is separable and each output is a convex combination of
    inputs, so the projection commutes with it. Projecting on the coarse grid
    and resizing with three small matrices gives the same result far faster.
    """

    def __init__(self, dim: int, out_channels: int, target: tuple[int, int, int], grid: Grid):
        super().__init__()
        if any(g > s for g, s in zip(grid, target)):
            raise ConfigError(f"patch grid {grid} larger than target {target}")
        self.target = tuple(target)
        self.grid = tuple(grid)
        self.proj = nn.Conv3d(dim, out_channels, kernel_size=1)
        for axis, (g, s) in zip("thw", zip(grid, target)):
            self.register_buffer(f"resize_{axis}", _linear_resize_matrix(g, s), persistent=False)

    def forward(self, x_t: torch.Tensor) -> torch.Tensor:
        w = self.proj.weight.flatten(1)
        coarse = tokens_to_volume(F.linear(x_t, w, self.proj.bias), self.grid)
        mt, mh, mw = (m.to(coarse.dtype) for m in (self.resize_t, self.resize_h, self.resize_w))
        return torch.einsum("bcthw,Tt,Hh,Ww->bcTHW", coarse, mt, mh, mw)


class ConvTransBridge(nn.Module):
    """Adaptive-average-pool a conv feature to the patch grid, embed C -> D and LayerNorm."""

    def __init__(self, in_channels: int, dim: int, grid: Grid):
        super().__init__()
        self.grid = tuple(grid)
        self.proj = nn.Linear(in_channels, dim)
        self.norm = nn.LayerNorm(dim)

    def pool(self, x_c: torch.Tensor) -> torch.Tensor:
        """(B, C, T, H, W) -> (B, P, C) block means."""
        return F.adaptive_avg_pool3d(x_c, self.grid).flatten(2).transpose(1, 2)

    def forward(self, x_c: torch.Tensor) -> torch.Tensor:
        return self.norm(self.proj(self.pool(x_c)))
