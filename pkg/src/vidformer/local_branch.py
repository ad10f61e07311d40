"""Local convolution branch: stem, global-attention weighting and the residual 3D block."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError


class Stem(nn.Module):
    """3x3x3 convolution, stride 1, padding 1 on every axis."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv3d(in_channels, width, kernel_size=3, padding=1)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        if clip.dim() != 5 or clip.shape[1] != self.in_channels:
            raise ConfigError(f"expected clip (B, {self.in_channels}, T, H, W), got {tuple(clip.shape)}")
        return self.conv(clip)


def chunked_attention(q, k, v, scale: float, chunk: int = 1024) -> torch.Tensor:
    """softmax(q k^T * scale) v, evaluated over blocks of query rows.

    Row blocks keep peak memory at chunk x N instead of N x N (N = 16384 for
    128x128 frames); each row's softmax is unchanged by the split.
    """
    n = q.shape[-2]
    if n <= chunk:
        return (q @ k.transpose(-1, -2) * scale).softmax(dim=-1) @ v
    kt = k.transpose(-1, -2)
    return torch.cat([(q[..., i:i + chunk, :] @ kt * scale).softmax(dim=-1) @ v
                      for i in range(0, n, chunk)], dim=-2)


class PooledAttention(nn.Module):
    """Multi-head attention over the positions left after average pooling.

    ``kind="spatial"`` pools over T and attends across the H*W positions,
    ``kind="temporal"`` pools over (H, W) and attends across the T positions.
    Logits are scaled by sqrt(C) whatever the head count; the first kernel-1
    projection is used both as query and value.
    """

    def __init__(self, channels: int, heads: int = 4, kind: str = "spatial"):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"{heads} heads do not divide {channels} channels")
        if kind not in ("spatial", "temporal"):
            raise ValueError(kind)
        self.channels, self.heads, self.kind = channels, heads, kind
        self.proj1 = nn.Conv3d(channels, channels, kernel_size=1)
        self.proj2 = nn.Conv3d(channels, channels, kernel_size=1)

    def pool(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "spatial":
            return x.mean(dim=2, keepdim=True)
        return x.mean(dim=(3, 4), keepdim=True)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        pooled = self.pool(x)
        q = self.proj1(pooled)
        k = self.proj2(pooled)
        b, c = q.shape[:2]
        spatial_shape = q.shape[2:]
        h = self.heads
        q = q.reshape(b, h, c // h, -1).transpose(-1, -2)  # (B, h, N, C/h)
        k = k.reshape(b, h, c // h, -1).transpose(-1, -2)
        scale = 1.0 / math.sqrt(self.channels)
        if return_weights:
            weights = (q @ k.transpose(-1, -2) * scale).softmax(dim=-1)  # (B, h, N, N)
            out = weights @ q
        else:
            out = chunked_attention(q, k, q, scale)
        out = out.transpose(-1, -2).reshape(b, c, *spatial_shape)
        if return_weights:
            return out, weights
        return out


def ga_weight(x: torch.Tensor, s: torch.Tensor | None, t: torch.Tensor | None) -> torch.Tensor:
    """sigmoid(s + t) * x; a missing map is left out of the sum, both missing is identity."""
    if s is None and t is None:
        return x
    logits = (0 if s is None else s) + (0 if t is None else t)
    try:
        torch.broadcast_shapes(logits.shape, x.shape)
    except RuntimeError as exc:
        raise ValueError(f"attention maps {tuple(logits.shape)} do not broadcast to {tuple(x.shape)}") from exc
    return torch.sigmoid(logits) * x


class BSBlock(nn.Module):
    """u = conv1x1(x_tc + x_g); out = GELU(GroupNorm(conv3x3(u))) + u, then optional 2x spatial pooling."""

    def __init__(self, in_channels: int, out_channels: int, groups: int = 4, pool: bool = True):
        super().__init__()
        if out_channels % groups:
            raise ConfigError(f"{groups} groups do not divide {out_channels} channels")
        self.in_channels = in_channels
        self.reduce = nn.Conv3d(in_channels, out_channels, kernel_size=1)
        self.conv = nn.Conv3d(out_channels, out_channels, kernel_size=3, padding=1)
        self.norm = nn.GroupNorm(groups, out_channels)
        self.pool = pool

    def forward(self, x_g: torch.Tensor, x_tc: torch.Tensor | None = None, pool: bool | None = None) -> torch.Tensor:
        if x_tc is not None:
            if x_tc.shape != x_g.shape:
                raise ValueError(f"bridge feature {tuple(x_tc.shape)} does not match {tuple(x_g.shape)}")
            x_g = x_g + x_tc
        if x_g.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x_g.shape[1]}")
        u = self.reduce(x_g)
        out = F.gelu(self.norm(self.conv(u))) + u
        if self.pool if pool is None else pool:
            out = F.avg_pool3d(out, kernel_size=(1, 2, 2), stride=(1, 2, 2))
        return out


class GAStage(nn.Module):
    """One stage of the local branch: pooled spatial/temporal attention weighting followed by a BSBlock."""

    def __init__(self, in_channels: int, out_channels: int, heads: int = 4, groups: int = 4,
                 pool: bool = True, spatial: bool = True, temporal: bool = True):
        super().__init__()
        self.spatial = PooledAttention(in_channels, heads, "spatial") if spatial else None
        self.temporal = PooledAttention(in_channels, heads, "temporal") if temporal else None
        self.block = BSBlock(in_channels, out_channels, groups, pool)

    def weight(self, x: torch.Tensor) -> torch.Tensor:
        s = self.spatial(x) if self.spatial is not None else None
        t = self.temporal(x) if self.temporal is not None else None
        return ga_weight(x, s, t)

    def forward(self, x_c: torch.Tensor, x_tc: torch.Tensor | None = None) -> torch.Tensor:
        return self.block(self.weight(x_c), x_tc)
