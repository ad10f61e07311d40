"""Training loop: AdamW, cosine annealing with warm restarts, dual-head objective."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, DataError, DivergenceError, ModelConfig, profile_windowing
from .dataio import ClipEntry, DatasetIndex, preprocess, standardize, window_starts
from .heads_loss import dual_objective, pearson_loss
from .model import VidFormer, init_params, save_checkpoint

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "epoch", "lr", "loss", "loss_r1", "loss_r2", "pearson_r1", "pearson_r2")


@dataclass(frozen=True)
class TrainSettings:
    lr_max: float = 8e-5
    lr_min: float = 2e-9
    weight_decay: float = 5e-4
    batch_size: int = 2
    steps: int | None = None
    epochs: int | None = None
    period_epochs: float = 10.0
    period_mult: float = 2.0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if (self.steps is None) == (self.epochs is None):
            raise ConfigError("give exactly one of steps / epochs")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError("need 0 <= lr_min <= lr_max")
        if self.batch_size < 1 or self.period_epochs <= 0 or self.period_mult < 1:
            raise ConfigError("batch_size >= 1, period_epochs > 0 and period_mult >= 1 required")


def warm_restart_lr(t: float, lr_max: float, lr_min: float, period: float, mult: float = 2.0) -> float:
    """Cosine-annealed rate at time ``t`` (same unit as ``period``).

    Period i lasts ``period * mult**i``. The rate is ``lr_max`` at each period
    start and exactly ``lr_min`` at its end; the restart happens just after.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    start, length = 0.0, period
    while t > start + length:
        start += length
        length *= mult
    frac = (t - start) / length
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


class ClipBank:
    """Preprocessed clips held in memory: frames (3, T, h, w) and per-frame ground truth."""

    def __init__(self, entries: list[ClipEntry], cfg: ModelConfig):
        if not entries:
            raise DataError("empty clip list")
        self.cfg = cfg
        self.length, self.stride = profile_windowing(cfg)
        self.names, self.frames, self.gt, self.starts = [], [], [], []
        for e in entries:
            if abs(e.frame_rate - cfg.frame_rate) > 1e-6:
                raise DataError(f"clip {e.name} runs at {e.frame_rate} fps, profile expects {cfg.frame_rate}")
            frames, gt = e.load()
            starts = window_starts(len(frames), self.length, self.stride)
            if not starts:
                log.warning("clip %s shorter than one window; skipped", e.name)
                continue
            self.names.append(e.name)
            self.frames.append(preprocess(frames, (cfg.height, cfg.width)))
            self.gt.append(gt)
            self.starts.append(starts)
        if not self.names:
            raise DataError("no clip holds a full window")

    def __len__(self):
        return len(self.names)

    def window(self, i: int, start: int) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.frames[i][:, start:start + self.length]
        y = torch.from_numpy(standardize(self.gt[i][start:start + self.length])).float()
        return x, y


def _batches(bank: ClipBank, batch_size: int, rng: np.random.Generator):
    """One epoch: every clip once, each with one random window, in shuffled batches."""
    order = rng.permutation(len(bank))
    picks = [(int(i), bank.starts[i][int(rng.integers(len(bank.starts[i])))]) for i in order]
    for b in range(0, len(picks), batch_size):
        chunk = picks[b:b + batch_size]
        xs, ys = zip(*(bank.window(i, s) for i, s in chunk))
        yield torch.stack(xs), torch.stack(ys)


@dataclass
class TrainResult:
    model: VidFormer
    log_rows: list[dict]
    steps: int


def train(cfg: ModelConfig, index: DatasetIndex | list[ClipEntry], settings: TrainSettings,
          out_dir: str | Path | None = None, split: str | None = "train") -> TrainResult:
    """Minimise the dual objective; writes ``loss.csv`` and ``model.pt`` under ``out_dir``."""
    entries = index if isinstance(index, list) else index.subset(split if split in index.splits else None)
    torch.manual_seed(settings.seed)
    rng = np.random.default_rng(settings.seed)
    bank = ClipBank(entries, cfg)
    model = init_params(cfg, settings.seed)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=settings.lr_max, weight_decay=settings.weight_decay)
    steps_per_epoch = math.ceil(len(bank) / settings.batch_size)
    total = settings.steps if settings.steps is not None else settings.epochs * steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows, step, epoch = [], 0, 0
    while step < total:
        for x, y in _batches(bank, settings.batch_size, rng):
            if step >= total:
                break
            lr = warm_restart_lr(step / steps_per_epoch, settings.lr_max, settings.lr_min,
                                 settings.period_epochs, settings.period_mult)
            for group in opt.param_groups:
                group["lr"] = lr
            r1, r2 = model(x)
            loss, parts = dual_objective(r1, r2, y, cfg.alpha)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            rows.append({
                "step": step, "epoch": epoch, "lr": lr, "loss": float(loss.detach()),
                "loss_r1": float(parts["r1"].detach()) if "r1" in parts else float("nan"),
                "loss_r2": float(parts["r2"].detach()) if "r2" in parts else float("nan"),
                "pearson_r1": float(pearson_loss(r1.detach(), y)) if r1 is not None else float("nan"),
                "pearson_r2": float(pearson_loss(r2.detach(), y)) if r2 is not None else float("nan"),
            })
            step += 1
            if out is not None and settings.checkpoint_every and step % settings.checkpoint_every == 0:
                save_checkpoint(out / f"model_step{step}.pt", model)
        epoch += 1

    model.eval()
    if out is not None:
        write_loss_csv(out / "loss.csv", rows)
        save_checkpoint(out / "model.pt", model, train_data=_fingerprint(index),
                        settings=asdict(settings), steps=step)
    return TrainResult(model, rows, step)


def _fingerprint(index) -> str:
    return index.fingerprint() if isinstance(index, DatasetIndex) else "unindexed"


def write_loss_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


@torch.no_grad()
def head_pearson_losses(model: VidFormer, bank: ClipBank) -> dict[str, float]:
    """Mean Pearson loss of each head over every window of every clip."""
    model.eval()
    sums: dict[str, list[float]] = {"r1": [], "r2": []}
    for i in range(len(bank)):
        for s in bank.starts[i]:
            x, y = bank.window(i, s)
            r1, r2 = model(x[None])
            for name, r in (("r1", r1), ("r2", r2)):
                if r is not None:
                    sums[name].append(float(pearson_loss(r[0], y)))
    return {k: float(np.mean(v)) for k, v in sums.items() if v}
