"""Model configuration, named profiles and the flat key-value config file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RuntimeError):
    """Problem with on-disk data (missing files, corrupt headers, ...)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


ABLATION_FLAGS = ("GA", "S-GA", "T-GA", "S-MHSA", "T-MHSA", "LCB", "GTB", "C-TB", "T-CB")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    clip_len: int = 50
    height: int = 32
    width: int = 32
    frame_rate: float = 10.0
    patch: tuple[int, int, int] = (10, 8, 8)
    stem_width: int = 8
    stage_widths: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 32
    conv_heads: int = 4
    trans_heads: int = 4
    ffn_hidden: int = 64
    gn_groups: int = 4
    reduce_dim: int = 4
    mlp_hidden: int = 256
    alpha: float = 0.5
    ablate: frozenset[str] = field(default_factory=frozenset)
    seed: int = 0

    def __post_init__(self):
        # normalise containers so configs built from lists still hash/compare
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "ablate", frozenset(self.ablate))
        self.validate()

    # -- derived quantities -------------------------------------------------
    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return (self.channels, self.clip_len, self.height, self.width)

    @property
    def grid(self) -> tuple[int, int, int]:
        pt, ph, pw = self.patch
        return (self.clip_len // pt, self.height // ph, self.width // pw)

    @property
    def num_patches(self) -> int:
        nt, nh, nw = self.grid
        return nt * nh * nw

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    def stage_input_shape(self, k: int) -> tuple[int, int, int, int]:
        """(C, T, H, W) of the feature entering conv stage k (1-based)."""
        c = self.stem_width if k == 1 else self.stage_widths[k - 2]
        scale = 2 ** (k - 1)
        return (c, self.clip_len, self.height // scale, self.width // scale)

    def stage_output_shape(self, k: int) -> tuple[int, int, int, int]:
        """(C, T, H, W) leaving conv stage k, after inter-stage pooling."""
        scale = 2 ** k if k < self.num_stages else 2 ** (k - 1)
        return (self.stage_widths[k - 1], self.clip_len, self.height // scale, self.width // scale)

    def uses(self, component: str) -> bool:
        return component not in self.ablate

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        unknown = set(self.ablate) - set(ABLATION_FLAGS)
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        if "LCB" in self.ablate and "GTB" in self.ablate:
            raise ConfigError("at least one of LCB/GTB must stay enabled")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.channels != 3:
            raise ConfigError("input clips must have 3 colour channels")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigError(f"patch must be three positive ints, got {self.patch}")
        for name, size, p in zip("THW", (self.clip_len, self.height, self.width), self.patch):
            if size % p:
                raise ConfigError(f"patch size {p} does not divide {name}={size}")
        if not self.stage_widths:
            raise ConfigError("need at least one stage")
        if self.embed_dim % self.trans_heads:
            raise ConfigError(f"trans_heads={self.trans_heads} does not divide D={self.embed_dim}")
        pool = 2 ** (self.num_stages - 1)
        if self.height % pool or self.width % pool:
            raise ConfigError(f"H, W must be divisible by {pool} for {self.num_stages} stages")
        for k in range(1, self.num_stages + 1):
            c_in = self.stage_input_shape(k)[0]
            if c_in % self.conv_heads:
                raise ConfigError(f"conv_heads={self.conv_heads} does not divide stage-{k} width {c_in}")
            if self.stage_widths[k - 1] % self.gn_groups:
                raise ConfigError(f"gn_groups={self.gn_groups} does not divide {self.stage_widths[k - 1]}")
            _, t, h, w = self.stage_input_shape(k)
            nt, nh, nw = self.grid
            if nt > t or nh > h or nw > w:
                raise ConfigError(f"patch grid {self.grid} larger than stage-{k} feature {(t, h, w)}")
        for name in ("stem_width", "embed_dim", "ffn_hidden", "reduce_dim", "mlp_hidden", "gn_groups", "conv_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.frame_rate <= 0:
            raise ConfigError("frame_rate must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch"] = list(self.patch)
        d["stage_widths"] = list(self.stage_widths)
        d["ablate"] = sorted(self.ablate)
        return d

    def fingerprint(self) -> str:
        """Hash of everything that determines parameter shapes and the forward graph."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("alpha")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _paper_profile(**overrides) -> ModelConfig:
    """250-frame 128x128 clips at 30 fps with 25x16x16 cube patches."""
    base = dict(clip_len=250, height=128, width=128, frame_rate=30.0, patch=(25, 16, 16),
                stem_width=16, stage_widths=(16, 32, 64), embed_dim=64, ffn_hidden=128)
    base.update(overrides)
    return ModelConfig(**base)


def _test_profile(**overrides) -> ModelConfig:
    """Laptop-scale profile: 50-frame 32x32 clips, 10x8x8 patches, three stages."""
    return ModelConfig(**overrides)


def _micro_profile(**overrides) -> ModelConfig:
    """Single-stage toy used for exhaustive finite-difference gradient checks."""
    base = dict(clip_len=10, height=16, width=16, patch=(5, 4, 4), stem_width=4,
                stage_widths=(8,), embed_dim=16, trans_heads=2, ffn_hidden=32,
                reduce_dim=2, mlp_hidden=16)
    base.update(overrides)
    return ModelConfig(**base)


PROFILES = {"paper": _paper_profile, "test": _test_profile, "micro": _micro_profile}


def get_profile(name: str, **overrides) -> ModelConfig:
    """Build a named profile ("paper", "test" or "micro") with field overrides."""
    try:
        return PROFILES[name](**overrides)
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def profile_windowing(cfg: ModelConfig) -> tuple[int, int]:
    """Window length and stride: the clip length and a fifth of it."""
    return cfg.clip_len, max(1, cfg.clip_len // 5)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ModelConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
        if kind.startswith("frozenset"):
            return frozenset(v.strip() for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    raise ConfigError(f"unsupported field type for {key!r}")


def parse_config_text(text: str) -> ModelConfig:
    """Parse ``key = value`` lines. ``profile = name`` selects the base profile."""
    values: dict[str, object] = {}
    profile = "test"
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "profile":
            if raw not in PROFILES:
                raise ConfigError(f"unknown profile {raw!r}")
            profile = raw
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return get_profile(profile, **values)


def load_config(path: str | Path) -> ModelConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: ModelConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg))
