"""Synthetic skin video: a pulse waveform rendered through a dichromatic reflection model.

Each skin pixel k in frame t is

    C_k(t) = I(t) * (l_s + rho_k * (base + gain * y(t))) + noise

where y is the pulse waveform, rho_k a smooth per-pixel gain field and I the
illumination. Values are rounded to 8 bits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import ConfigError
from .sigproc import BvpWaveform

log = logging.getLogger(__name__)

# diffuse reflectance per channel (R, G, B) and its pulse sensitivity;
# blood absorbs most strongly in green, so green darkens most at systole
DEFAULT_BASE = (150.0, 110.0, 90.0)
DEFAULT_GAIN = (-9.0, -36.0, -6.0)
DEFAULT_SPECULAR = (12.0, 12.0, 12.0)
BACKGROUND = (60.0, 70.0, 80.0)


@dataclass(frozen=True)
class BvpSpec:
    """Heart-rate profile and pulse shape.

    ``hr_end`` of None keeps the rate constant at ``hr``; otherwise HR ramps linearly.
    ``hrv_depth`` modulates each inter-beat interval by ``1 + depth * sin(2 pi f t)``.
    """

    hr: float = 72.0
    hr_end: float | None = None
    shape: str = "sinusoid"
    diastolic_ratio: float = 0.4
    hrv_depth: float = 0.0
    hrv_freq: float = 0.1
    rate: float = 30.0
    duration: float = 10.0
    phase: float = 0.0

    def __post_init__(self):
        for bpm in (self.hr, self.hr if self.hr_end is None else self.hr_end):
            if not 40.0 <= bpm <= 180.0:
                raise ConfigError(f"heart rate {bpm} bpm outside [40, 180]")
        if not 0.0 <= self.hrv_depth < 0.2:
            raise ConfigError(f"HRV modulation depth must lie in [0, 0.2), got {self.hrv_depth}")
        if self.shape not in ("sinusoid", "two_peak"):
            raise ConfigError(f"unknown pulse shape {self.shape!r}")
        if not 0.0 <= self.diastolic_ratio < 1.0:
            raise ConfigError("diastolic_ratio must lie in [0, 1)")
        if self.rate <= 0 or self.duration <= 0:
            raise ConfigError("rate and duration must be positive")

    @property
    def num_samples(self) -> int:
        return int(round(self.rate * self.duration))

    def hr_at(self, t):
        if self.hr_end is None:
            return np.full_like(np.asarray(t, dtype=float), self.hr)
        return self.hr + (self.hr_end - self.hr) * np.asarray(t, dtype=float) / self.duration

    @property
    def mean_hr(self) -> float:
        """Beats per minute averaged over the whole waveform (count of beats / duration)."""
        _, phase = _phase_track(self)
        return 60.0 * (phase[-1] - phase[0]) / self.duration


@dataclass
class SyntheticBvp:
    waveform: BvpWaveform
    peak_times: np.ndarray
    spec: BvpSpec


_FINE_RATE = 1000.0


def _phase_track(spec: BvpSpec) -> tuple[np.ndarray, np.ndarray]:
    """Beat phase (in cycles) on a 1 kHz grid covering the waveform."""
    t = np.arange(int(np.ceil(spec.duration * _FINE_RATE)) + 2) / _FINE_RATE
    period = 60.0 / spec.hr_at(t) * (1.0 + spec.hrv_depth * np.sin(2 * np.pi * spec.hrv_freq * t))
    freq = 1.0 / period
    cycles = np.concatenate([[0.0], np.cumsum(0.5 * (freq[1:] + freq[:-1])) / _FINE_RATE]) + spec.phase
    return t, cycles


# timings in seconds; the dicrotic wave trails systole by a roughly fixed delay
_SYSTOLIC_WIDTH, _DICROTIC_WIDTH, _DICROTIC_DELAY = 0.2, 0.12, 0.3


def _template(u: np.ndarray, shape: str, ratio: float, hr=60.0) -> np.ndarray:
    """Pulse value at beat fraction ``u`` in [0, 1); the systolic peak sits at u = 0."""
    if shape == "sinusoid":
        return np.cos(2 * np.pi * u)
    beats_per_s = np.asarray(hr) / 60.0
    d1 = np.minimum(u, 1 - u)
    d2 = np.abs(u - np.clip(_DICROTIC_DELAY * beats_per_s, 0.2, 0.45))
    raw = (np.exp(-d1 ** 2 / (2 * (_SYSTOLIC_WIDTH * beats_per_s) ** 2))
           + ratio * np.exp(-d2 ** 2 / (2 * (_DICROTIC_WIDTH * beats_per_s) ** 2)))
    return 2 * raw - 1


def synth_bvp(spec: BvpSpec) -> SyntheticBvp:
    """Sample the pulse waveform and report the generator's systolic peak times."""
    t_fine, cycles = _phase_track(spec)
    t = np.arange(spec.num_samples) / spec.rate
    phase = np.interp(t, t_fine, cycles)
    y = _template(np.mod(phase, 1.0), spec.shape, spec.diastolic_ratio, spec.hr_at(t))
    beats = np.arange(np.ceil(cycles[0]), np.floor(np.interp(t[-1], t_fine, cycles)) + 1)
    peaks = np.interp(beats, cycles, t_fine)
    if spec.shape != "sinusoid":
        # the dicrotic wave nudges the systolic maximum off u = 0; locate it on the fine grid
        fine = _template(np.mod(cycles, 1.0), spec.shape, spec.diastolic_ratio, spec.hr_at(t_fine))
        half = int(0.1 * _FINE_RATE)
        for j, p in enumerate(peaks):
            c = int(round(p * _FINE_RATE))
            lo, hi = max(c - half, 0), min(c + half + 1, len(fine))
            peaks[j] = t_fine[lo + int(np.argmax(fine[lo:hi]))]
        peaks = peaks[(peaks >= t[0]) & (peaks <= t[-1])]
    return SyntheticBvp(BvpWaveform(y, spec.rate), peaks, spec)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    illumination: str = "constant"
    illum_amplitude: float = 0.0
    illum_period: float = 10.0
    base: tuple[float, float, float] = DEFAULT_BASE
    gain: tuple[float, float, float] = DEFAULT_GAIN
    specular: tuple[float, float, float] = DEFAULT_SPECULAR
    background: tuple[float, float, float] = BACKGROUND
    rho_spread: float = 0.1
    jitter_max: float = 0.0
    jitter_sigma: float = 0.0
    noise_sigma: float = 0.0
    mask: np.ndarray | None = field(default=None, compare=False)
    seed: int = 0

    def __post_init__(self):
        if self.illumination not in ("constant", "drift", "sinusoid"):
            raise ConfigError(f"unknown illumination profile {self.illumination!r}")
        if self.noise_sigma < 0 or self.jitter_sigma < 0 or self.jitter_max < 0:
            raise ConfigError("noise and jitter parameters must be non-negative")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != (self.height, self.width):
                raise ConfigError(f"mask shape {m.shape} != {(self.height, self.width)}")
            if not m.any():
                raise ConfigError("skin mask is empty")

    def skin_mask(self) -> np.ndarray:
        if self.mask is not None:
            return np.asarray(self.mask, dtype=bool)
        yy, xx = np.mgrid[:self.height, :self.width]
        cy, cx = (self.height - 1) / 2, (self.width - 1) / 2
        return ((yy - cy) / (0.42 * self.height)) ** 2 + ((xx - cx) / (0.34 * self.width)) ** 2 <= 1.0

    def illumination_at(self, t: np.ndarray, duration: float) -> np.ndarray:
        if self.illumination == "constant":
            return np.ones_like(t)
        if self.illumination == "drift":
            return 1.0 + self.illum_amplitude * t / max(duration, 1e-12)
        return 1.0 + self.illum_amplitude * np.sin(2 * np.pi * t / self.illum_period)


def gain_field(scene: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-pixel reflectance multiplier around 1 (the rho map)."""
    if scene.rho_spread == 0:
        return np.ones((scene.height, scene.width))
    noise = ndimage.gaussian_filter(rng.standard_normal((scene.height, scene.width)), sigma=3.0)
    noise /= max(noise.std(), 1e-12)
    return 1.0 + scene.rho_spread * noise


def jitter_path(scene: SceneConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Integer (dy, dx) per frame from a clipped Gaussian random walk."""
    if scene.jitter_sigma == 0 or scene.jitter_max == 0:
        return np.zeros((n, 2), dtype=int)
    walk = np.cumsum(rng.normal(0.0, scene.jitter_sigma, size=(n, 2)), axis=0)
    return np.round(np.clip(walk, -scene.jitter_max, scene.jitter_max)).astype(int)


def _shift(img: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    out = np.empty_like(img)
    out[...] = fill
    h, w = img.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def render_intensity(y: np.ndarray, scene: SceneConfig, rate: float,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free, unquantised frames (T, H, W, 3) and the per-frame skin masks (T, H, W)."""
    rng = np.random.default_rng(scene.seed) if rng is None else rng
    y = np.asarray(y, dtype=float)
    n = len(y)
    t = np.arange(n) / rate
    light = scene.illumination_at(t, n / rate)
    mask = scene.skin_mask()
    rho = gain_field(scene, rng)
    base = np.asarray(scene.base)
    gain = np.asarray(scene.gain)
    spec = np.asarray(scene.specular)
    bg = np.asarray(scene.background)
    offsets = jitter_path(scene, n, rng)

    # reflectance before illumination: l_s + rho * (base + gain * y)
    diffuse = rho[None, :, :, None] * (base + gain * y[:, None, None, None])
    skin = spec + diffuse
    frames = np.where(mask[None, :, :, None], skin, bg) * light[:, None, None, None]
    masks = np.repeat(mask[None], n, axis=0)
    for i, (dy, dx) in enumerate(offsets):
        if dy or dx:
            frames[i] = _shift(frames[i], dy, dx, bg * light[i])
            masks[i] = _shift(mask, dy, dx, False)
    return frames, masks


def render_clip(bvp: BvpWaveform, scene: SceneConfig, n_frames: int | None = None):
    """Render 8-bit frames (T, H, W, 3) and the aligned ground truth.

    Returns ``(frames, gt, masks)``. Raises ConfigError when the noise-free
    signal leaves [0, 255] (saturation would break the pulse mapping).
    """
    n = len(bvp) if n_frames is None else n_frames
    if n > len(bvp):
        raise ConfigError(f"clip of {n} frames needs at least {n} waveform samples, got {len(bvp)}")
    rng = np.random.default_rng(scene.seed)
    y = bvp.samples[:n]
    frames, masks = render_intensity(y, scene, bvp.rate, rng)
    bad = (frames < 0) | (frames > 255)
    if bad.any():
        where = np.argwhere(bad.any(axis=(0, 3)))
        listed = ", ".join(f"({r},{c})" for r, c in where[:8])
        raise ConfigError(f"channel gains overflow 8 bits at {len(where)} pixel(s): {listed}"
                          + (" ..." if len(where) > 8 else ""))
    if scene.noise_sigma > 0:
        frames = frames + rng.normal(0.0, scene.noise_sigma, size=frames.shape)
    frames = np.clip(np.round(frames), 0, 255).astype(np.uint8)
    return frames, BvpWaveform(y.copy(), bvp.rate), masks


@dataclass(frozen=True)
class DatasetSpec:
    """Ranges sampled per clip by :func:`make_dataset`."""

    n_clips: int = 8
    duration: float = 20.0
    rate: float = 10.0
    height: int = 32
    width: int = 32
    hr_range: tuple[float, float] = (48.0, 150.0)
    noise_range: tuple[float, float] = (0.0, 0.0)
    illum_amplitude_range: tuple[float, float] = (0.0, 0.0)
    jitter_max: float = 0.0
    jitter_sigma: float = 0.0
    hrv_depth_range: tuple[float, float] = (0.0, 0.0)
    shapes: tuple[str, ...] = ("sinusoid", "two_peak")
    gt_rate: float | None = None
    gain: tuple[float, float, float] = DEFAULT_GAIN
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.hr_range
        if not 40 <= lo <= hi <= 180:
            raise ConfigError(f"hr_range {self.hr_range} must lie within [40, 180]")
        if self.n_clips < 1:
            raise ConfigError("n_clips must be positive")


def _draw(rng: np.random.Generator, lo_hi) -> float:
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def clip_specs(ds: DatasetSpec) -> list[tuple[BvpSpec, SceneConfig]]:
    """Per-clip waveform and scene parameters, derived from independent child seeds."""
    out = []
    for i, child in enumerate(np.random.SeedSequence(ds.seed).spawn(ds.n_clips)):
        rng = np.random.default_rng(child)
        hr = _draw(rng, ds.hr_range)
        shape = ds.shapes[int(rng.integers(len(ds.shapes)))]
        bvp = BvpSpec(hr=hr, shape=shape, diastolic_ratio=float(rng.uniform(0.25, 0.5)),
                      hrv_depth=_draw(rng, ds.hrv_depth_range), hrv_freq=float(rng.uniform(0.08, 0.3)),
                      rate=ds.gt_rate or ds.rate, duration=ds.duration, phase=float(rng.uniform()))
        amp = _draw(rng, ds.illum_amplitude_range)
        scene = SceneConfig(height=ds.height, width=ds.width,
                            illumination="sinusoid" if amp > 0 else "constant", illum_amplitude=amp,
                            illum_period=float(rng.uniform(5.0, 20.0)), noise_sigma=_draw(rng, ds.noise_range),
                            jitter_max=ds.jitter_max, jitter_sigma=ds.jitter_sigma, gain=tuple(ds.gain),
                            seed=int(rng.integers(2 ** 31)))
        out.append((bvp, scene))
    return out


def make_dataset(root: str | Path, ds: DatasetSpec) -> Path:
    """Write ``ds.n_clips`` clips under ``root`` (one directory each) plus ``dataset.json``.

    Output bytes depend only on ``ds``; re-running with the same spec reproduces the tree.
    """
    from .dataio import write_frames, write_gt_csv

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (bspec, scene) in enumerate(clip_specs(ds)):
        name = f"clip_{i:04d}"
        clip_dir = root / name
        clip_dir.mkdir(exist_ok=True)
        gt_bvp = synth_bvp(bspec)
        if ds.gt_rate and ds.gt_rate != ds.rate:
            video_bvp = synth_bvp(BvpSpec(**{**asdict(bspec), "rate": ds.rate}))
        else:
            video_bvp = gt_bvp
        frames, _, _ = render_clip(video_bvp.waveform, scene)
        write_frames(clip_dir / "frames.bin", frames, ds.rate)
        write_gt_csv(clip_dir / "gt.csv", gt_bvp.waveform.samples, gt_bvp.waveform.rate)
        meta = {
            "name": name,
            "subject": name,
            "hr_bpm": round(bspec.mean_hr, 6),
            "shape": bspec.shape,
            "hrv_depth": bspec.hrv_depth,
            "noise_sigma": scene.noise_sigma,
            "illum_amplitude": scene.illum_amplitude,
            "scene_seed": scene.seed,
            "frame_rate": ds.rate,
            "gt_rate": gt_bvp.waveform.rate,
        }
        (clip_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        records.append(meta)
    spec = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(ds).items()}
    (root / "dataset.json").write_text(json.dumps({"spec": spec, "clips": records}, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d clips to %s", len(records), root)
    return root
