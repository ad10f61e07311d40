"""End-to-end model wiring, parameter initialisation and checkpoints."""

from __future__ import annotations

import math
from collections import OrderedDict
from pathlib import Path

import torch
from torch import nn

from .config import ConfigError, ModelConfig
from .ctim import ConvTransBridge, TransConvBridge
from .global_branch import GlobalStage, PatchEmbedding, cube_patchify
from .heads_loss import ConvHead, TokenHead
from .local_branch import GAStage, Stem


class VidFormer(nn.Module):
    """Dual-branch rPPG network.

    Stage k of each branch reads only stage k-1 outputs of both branches:
    the conv stage consumes the trans->conv bridge of X_T^(k-1), the
    transformer stage consumes the conv->trans bridge of X_C^(k-1).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        K = cfg.num_stages
        self.use_conv = cfg.uses("LCB")
        self.use_trans = cfg.uses("GTB")
        bridges = self.use_conv and self.use_trans
        self.use_tc = bridges and cfg.uses("T-CB")
        self.use_ct = bridges and cfg.uses("C-TB")
        grid = cfg.grid

        if self.use_conv:
            self.stem = Stem(cfg.channels, cfg.stem_width)
            ga = cfg.uses("GA")
            self.conv_stages = nn.ModuleList(
                GAStage(cfg.stage_input_shape(k)[0], cfg.stage_widths[k - 1], cfg.conv_heads, cfg.gn_groups,
                        pool=k < K, spatial=ga and cfg.uses("S-GA"), temporal=ga and cfg.uses("T-GA"))
                for k in range(1, K + 1))
            self.conv_head = ConvHead(cfg.stage_widths[-1])
        if self.use_trans:
            pt, ph, pw = cfg.patch
            self.embed = PatchEmbedding(cfg.channels * pt * ph * pw, cfg.num_patches, cfg.embed_dim)
            self.trans_stages = nn.ModuleList(
                GlobalStage(cfg.embed_dim, cfg.trans_heads, cfg.ffn_hidden,
                            spatial=cfg.uses("S-MHSA"), temporal=cfg.uses("T-MHSA"))
                for _ in range(K))
            self.token_head = TokenHead(cfg.embed_dim, cfg.num_patches, cfg.clip_len, cfg.reduce_dim, cfg.mlp_hidden)
        if self.use_tc:
            self.tc_bridges = nn.ModuleList(
                TransConvBridge(cfg.embed_dim, cfg.stage_input_shape(k)[0], cfg.stage_input_shape(k)[1:], grid)
                for k in range(1, K + 1))
        if self.use_ct:
            self.ct_bridges = nn.ModuleList(
                ConvTransBridge(cfg.stage_input_shape(k)[0], cfg.embed_dim, grid) for k in range(1, K + 1))

    def check_input(self, clip: torch.Tensor) -> None:
        if clip.dim() != 5 or tuple(clip.shape[1:]) != self.cfg.input_shape:
            raise ConfigError(f"clip shape {tuple(clip.shape)} does not match profile (B, {self.cfg.input_shape})")

    def conv_step(self, k: int, x_c: torch.Tensor, x_t: torch.Tensor | None) -> torch.Tensor:
        x_tc = self.tc_bridges[k - 1](x_t) if self.use_tc else None
        return self.conv_stages[k - 1](x_c, x_tc)

    def trans_step(self, k: int, x_t: torch.Tensor, x_c: torch.Tensor | None) -> torch.Tensor:
        x_ct = self.ct_bridges[k - 1](x_c) if self.use_ct else None
        return self.trans_stages[k - 1](x_t, x_ct, self.cfg.grid)

    def forward(self, clip: torch.Tensor, branch_order: str = "conv_first"):
        """Return (R1, R2), each (B, T); an ablated branch yields None."""
        self.check_input(clip)
        x_c = self.stem(clip) if self.use_conv else None
        x_t = self.embed(cube_patchify(clip, self.cfg.patch)[0]) if self.use_trans else None
        for k in range(1, self.cfg.num_stages + 1):
            if branch_order == "conv_first":
                new_c = self.conv_step(k, x_c, x_t) if self.use_conv else None
                new_t = self.trans_step(k, x_t, x_c) if self.use_trans else None
            else:
                new_t = self.trans_step(k, x_t, x_c) if self.use_trans else None
                new_c = self.conv_step(k, x_c, x_t) if self.use_conv else None
            x_c, x_t = new_c, new_t
        r1 = self.conv_head(x_c) if self.use_conv else None
        r2 = self.token_head(x_t) if self.use_trans else None
        return r1, r2


def _init_module(m: nn.Module) -> None:
    # apply() visits children before parents, so the bridge rule below wins
    if isinstance(m, (nn.Conv1d, nn.Conv3d)):
        fan_in = m.weight[0].numel()
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_in))
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, TransConvBridge):
        # unit-scale tokens through a He-scaled projection would swamp the conv stream
        # at step 0; the bridge starts silent and opens as training finds it useful
        nn.init.zeros_(m.proj.weight)


def init_params(cfg: ModelConfig, seed: int | None = None) -> VidFormer:
    """Build a model with seed-deterministic parameters (global RNG state is left untouched)."""
    seed = cfg.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VidFormer(cfg)
        model.apply(_init_module)
    return model


def param_store(model: nn.Module) -> OrderedDict[str, torch.Tensor]:
    return OrderedDict((name, p.detach().clone()) for name, p in model.named_parameters())


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def hr_from_heads(r1, r2, rate: float) -> float:
    """Average the heart rates estimated from both heads; falls back to whichever head exists."""
    from .sigproc import estimate_hr

    rates = [estimate_hr(_np(r), rate) for r in (r1, r2) if r is not None]
    if not rates:
        raise ValueError("no head output")
    return float(sum(rates) / len(rates))


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return x


def save_checkpoint(path: str | Path, model: VidFormer, **extra) -> None:
    state = {
        "config": model.cfg.to_dict(),
        "fingerprint": model.cfg.fingerprint(),
        "state_dict": model.state_dict(),
        **extra,
    }
    torch.save(state, path)


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None) -> tuple[VidFormer, dict]:
    """Load a checkpoint; when ``cfg`` is given its fingerprint must match the stored one."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    stored = ModelConfig(**state["config"])
    if stored.fingerprint() != state["fingerprint"]:
        raise ConfigError(f"{path}: stored config does not match its fingerprint")
    if cfg is not None and cfg.fingerprint() != state["fingerprint"]:
        raise ConfigError(f"{path}: checkpoint fingerprint {state['fingerprint']} != config {cfg.fingerprint()}")
    model = init_params(stored)
    model.load_state_dict(state["state_dict"])
    return model, state
