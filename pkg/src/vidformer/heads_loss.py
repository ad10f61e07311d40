"""Waveform heads and the training objective."""

from __future__ import annotations

import logging

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError

log = logging.getLogger(__name__)


class ConvHead(nn.Module):
    """1x1x1 conv to a single channel, then the spatial mean: (B, C, T, H, W) -> (B, T)."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv3d(channels, 1, kernel_size=1)

    def forward(self, x_c: torch.Tensor) -> torch.Tensor:
        return self.proj(x_c).mean(dim=(3, 4))[:, 0]


class TokenHead(nn.Module):
    """Conv1d over the embedding axis (D -> d_r), flatten, then a two-layer MLP to T samples."""

    def __init__(self, dim: int, num_patches: int, length: int, reduce_dim: int = 4, hidden: int = 256):
        super().__init__()
        self.reduce = nn.Conv1d(dim, reduce_dim, kernel_size=1)
        self.fc1 = nn.Linear(num_patches * reduce_dim, hidden)
        self.fc2 = nn.Linear(hidden, length)

    def forward(self, x_t: torch.Tensor) -> torch.Tensor:
        z = self.reduce(x_t.transpose(1, 2)).flatten(1)
        return self.fc2(F.gelu(self.fc1(z)))


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def pearson_loss(y, Y) -> torch.Tensor:
    """1 - r(y, Y) over the last axis, averaged over any leading axes.

    A window where either signal has zero variance scores 1 (r taken as 0).
    """
    y, Y = _as_tensor(y), _as_tensor(Y)
    if y.shape != Y.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(Y.shape)}")
    if y.shape[-1] < 2:
        raise ValueError("need at least two samples")
    yc = y - y.mean(dim=-1, keepdim=True)
    Yc = Y - Y.mean(dim=-1, keepdim=True)
    den_sq = (yc * yc).sum(-1) * (Yc * Yc).sum(-1)
    ok = den_sq > 0
    if not bool(ok.all()):
        log.warning("zero-variance window in pearson_loss; scoring it as r = 0")
    # keep sqrt away from 0 so the masked branch has finite gradients
    r = (yc * Yc).sum(-1) / torch.sqrt(torch.where(ok, den_sq, torch.ones_like(den_sq)))
    r = torch.where(ok, r, torch.zeros_like(r))
    return (1 - r).mean()


def smooth_l1_loss(y, Y) -> torch.Tensor:
    y, Y = _as_tensor(y), _as_tensor(Y)
    if y.shape != Y.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(Y.shape)}")
    d = (Y - y).abs()
    return torch.where(d < 1, 0.5 * d * d, d - 0.5).mean()


def combined_loss(y, Y, alpha: float = 0.5) -> torch.Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * pearson_loss(y, Y) + (1 - alpha) * smooth_l1_loss(y, Y)


def dual_objective(r1, r2, Y, alpha: float = 0.5) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Sum of the combined loss of each available head; returns (total, per-head parts)."""
    parts = {}
    for name, est in (("r1", r1), ("r2", r2)):
        if est is not None:
            parts[name] = combined_loss(est, Y, alpha)
    if not parts:
        raise ValueError("no head output to score")
    return sum(parts.values()), parts
