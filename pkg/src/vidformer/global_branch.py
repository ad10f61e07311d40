"""Global transformer branch: cube patches, token embedding, ST-MHSA and the transformer block."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError

Grid = tuple[int, int, int]


def patch_grid(shape: tuple[int, int, int], patch: tuple[int, int, int]) -> Grid:
    for name, size, p in zip("THW", shape, patch):
        if size % p:
            raise ConfigError(f"patch size {p} does not divide {name}={size}")
    return tuple(s // p for s, p in zip(shape, patch))


def cube_patchify(clip: torch.Tensor, patch: tuple[int, int, int]) -> tuple[torch.Tensor, Grid]:
    """(B, C, T, H, W) -> (B, P, C*pt*ph*pw), patches ordered time-major then row-major."""
    b, c, t, h, w = clip.shape
    pt, ph, pw = patch
    nt, nh, nw = patch_grid((t, h, w), patch)
    x = clip.reshape(b, c, nt, pt, nh, ph, nw, pw)
    x = x.permute(0, 2, 4, 6, 1, 3, 5, 7)
    return x.reshape(b, nt * nh * nw, c * pt * ph * pw), (nt, nh, nw)


def cube_unpatchify(cubes: torch.Tensor, grid: Grid, patch: tuple[int, int, int], channels: int = 3) -> torch.Tensor:
    b = cubes.shape[0]
    nt, nh, nw = grid
    pt, ph, pw = patch
    x = cubes.reshape(b, nt, nh, nw, channels, pt, ph, pw)
    x = x.permute(0, 4, 1, 5, 2, 6, 3, 7)
    return x.reshape(b, channels, nt * pt, nh * ph, nw * pw)


class PatchEmbedding(nn.Module):
    """Linear cube embedding plus a learnable positional table drawn from N(0, 1)."""

    def __init__(self, cube_dim: int, num_patches: int, dim: int):
        super().__init__()
        self.proj = nn.Linear(cube_dim, dim)
        self.pos = nn.Parameter(torch.randn(num_patches, dim))

    def forward(self, cubes: torch.Tensor) -> torch.Tensor:
        return self.proj(cubes) + self.pos


def rearrange_tokens(x: torch.Tensor, grid: Grid, mode: str) -> torch.Tensor:
    """(B, P, D) -> (B*nt, nh*nw, D) for ``spatial`` or (B*nh*nw, nt, D) for ``temporal``."""
    b, p, d = x.shape
    nt, nh, nw = grid
    if nt * nh * nw != p:
        raise ValueError(f"grid {grid} inconsistent with {p} tokens")
    x = x.reshape(b, nt, nh * nw, d)
    if mode == "spatial":
        return x.reshape(b * nt, nh * nw, d)
    if mode == "temporal":
        return x.transpose(1, 2).reshape(b * nh * nw, nt, d)
    raise ValueError(f"unknown mode {mode!r}")


def restore_tokens(x: torch.Tensor, grid: Grid, mode: str) -> torch.Tensor:
    """Inverse of :func:`rearrange_tokens`."""
    nt, nh, nw = grid
    d = x.shape[-1]
    if mode == "spatial":
        return x.reshape(-1, nt * nh * nw, d)
    if mode == "temporal":
        b = x.shape[0] // (nh * nw)
        return x.reshape(b, nh * nw, nt, d).transpose(1, 2).reshape(b, nt * nh * nw, d)
    raise ValueError(f"unknown mode {mode!r}")


class SelfAttention(nn.Module):
    """Standard multi-head self-attention over the second axis of (N, L, D)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide D={dim}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        n, length, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(n, length, 3, h, d // h).permute(2, 0, 3, 1, 4)
        weights = (q @ k.transpose(-1, -2) / math.sqrt(d // h)).softmax(dim=-1)
        y = weights @ v
        y = y.transpose(1, 2).reshape(n, length, d)
        y = self.out(y)
        if return_weights:
            return y, weights
        return y


class STMHSA(nn.Module):
    """Parallel spatial and temporal self-attention, each with its own LayerNorm and residual.

    Both branch outputs are mapped back to (B, P, D) before they are summed.
    """

    def __init__(self, dim: int, heads: int, spatial: bool = True, temporal: bool = True):
        super().__init__()
        self.spatial = spatial
        self.temporal = temporal
        if spatial:
            self.norm_s = nn.LayerNorm(dim)
            self.attn_s = SelfAttention(dim, heads)
        if temporal:
            self.norm_t = nn.LayerNorm(dim)
            self.attn_t = SelfAttention(dim, heads)

    def forward(self, x: torch.Tensor, x_ct: torch.Tensor | None, grid: Grid) -> torch.Tensor:
        s = x if x_ct is None else x + x_ct
        if not (self.spatial or self.temporal):
            return s
        out = 0
        if self.spatial:
            xs = rearrange_tokens(s, grid, "spatial")
            out = out + restore_tokens(self.attn_s(self.norm_s(xs)) + xs, grid, "spatial")
        if self.temporal:
            xt = rearrange_tokens(s, grid, "temporal")
            out = out + restore_tokens(self.attn_t(self.norm_t(xt)) + xt, grid, "temporal")
        return out


class TransformerBlock(nn.Module):
    """FFN(LN(x)) + LN(x): the residual wraps the normalised input."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x_mt: torch.Tensor) -> torch.Tensor:
        n = self.norm(x_mt)
        return self.fc2(F.gelu(self.fc1(n))) + n


class GlobalStage(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int, spatial: bool = True, temporal: bool = True):
        super().__init__()
        self.attn = STMHSA(dim, heads, spatial, temporal)
        self.block = TransformerBlock(dim, hidden)

    def forward(self, x_t: torch.Tensor, x_ct: torch.Tensor | None, grid: Grid) -> torch.Tensor:
        return self.block(self.attn(x_t, x_ct, grid))
