"""On-disk clip layout, ingestion, windowing and preprocessing.

Layout: one directory per clip holding either ``frames.bin`` (raw tensor file, see
:data:`HEADER`) or a ``frames/`` directory of PNG images with ``meta.json``
carrying ``frame_rate``; plus ``gt.csv`` with columns ``time_s,bvp``.

``frames.bin`` header (little endian, 31 bytes)::

    magic   4s   b"VFRM"
    version u16  1
    T H W C u32 x 4
    dtype   u8   1 = uint8, 2 = float32
    fps     f64

followed by T*H*W*C samples in (T, H, W, C) order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .config import DataError

log = logging.getLogger(__name__)

MAGIC = b"VFRM"
VERSION = 1
HEADER = struct.Struct("<4sHIIIIBd")
_DTYPES = {1: np.dtype(np.uint8), 2: np.dtype("<f4")}
_CODES = {v: k for k, v in _DTYPES.items()}


class MissingGroundTruthError(DataError):
    pass


class RateMismatchError(DataError):
    pass


class CorruptHeaderError(DataError):
    pass


def write_frames(path: str | Path, frames: np.ndarray, fps: float) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"frames must be (T, H, W, C), got {frames.shape}")
    dtype = frames.dtype.newbyteorder("<") if frames.dtype.itemsize > 1 else frames.dtype
    if dtype not in _CODES:
        raise ValueError(f"unsupported dtype {frames.dtype}")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, *frames.shape, _CODES[dtype], float(fps)))
        fh.write(np.ascontiguousarray(frames, dtype=dtype).tobytes())


def read_frames_header(path: str | Path) -> tuple[tuple[int, int, int, int], np.dtype, float]:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise CorruptHeaderError(f"{path}: truncated header")
    magic, version, t, h, w, c, code, fps = HEADER.unpack(raw)
    if magic != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptHeaderError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise CorruptHeaderError(f"{path}: unknown dtype code {code}")
    if not (fps > 0 and np.isfinite(fps)):
        raise CorruptHeaderError(f"{path}: invalid frame rate {fps}")
    shape = (t, h, w, c)
    size = Path(path).stat().st_size - HEADER.size
    if size != int(np.prod(shape)) * _DTYPES[code].itemsize:
        raise CorruptHeaderError(f"{path}: header declares {shape} but payload has {size} bytes")
    return shape, _DTYPES[code], fps


def read_frames(path: str | Path) -> tuple[np.ndarray, float]:
    shape, dtype, fps = read_frames_header(path)
    data = np.fromfile(path, dtype=dtype, offset=HEADER.size)
    return data.reshape(shape), fps


def write_gt_csv(path: str | Path, samples, rate: float) -> None:
    samples = np.asarray(samples, dtype=float)
    t = np.arange(len(samples)) / rate
    np.savetxt(path, np.column_stack([t, samples]), delimiter=",", header="time_s,bvp", comments="", fmt="%.9g")


def read_gt_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable ground truth ({exc})") from exc
    if data.shape[1] < 2 or len(data) < 2:
        raise DataError(f"{path}: need two columns and at least two rows")
    t, v = data[:, 0], data[:, 1]
    if np.any(np.diff(t) <= 0):
        raise DataError(f"{path}: time stamps must increase")
    return t, v


def resample_gt(t: np.ndarray, v: np.ndarray, n_frames: int, fps: float, where: str = "") -> np.ndarray:
    """Linearly interpolate ground truth onto the frame clock.

    The ground truth must cover the clip to within one frame period at each end.
    """
    frame_t = np.arange(n_frames) / fps
    slack = 1.0 / fps + 1e-9
    if t[0] > frame_t[0] + slack or t[-1] < frame_t[-1] - slack:
        raise RateMismatchError(
            f"{where}: ground truth spans [{t[0]:.3f}, {t[-1]:.3f}] s but video spans "
            f"[0, {frame_t[-1]:.3f}] s at {fps} fps")
    return np.interp(frame_t, t, v)


@dataclass
class ClipEntry:
    name: str
    path: Path
    frame_rate: float
    n_frames: int
    gt_path: Path
    subject: str
    tags: dict = field(default_factory=dict)

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        """Frames (T, H, W, 3) and ground truth resampled to one value per frame."""
        frames = _load_frames(self.path)[0]
        t, v = read_gt_csv(self.gt_path)
        return frames, resample_gt(t, v, len(frames), self.frame_rate, self.name)


def _load_frames(clip_dir: Path) -> tuple[np.ndarray, float]:
    raw = clip_dir / "frames.bin"
    if raw.exists():
        return read_frames(raw)
    frame_dir = clip_dir / "frames"
    if frame_dir.is_dir():
        from PIL import Image

        meta = _read_meta(clip_dir)
        if "frame_rate" not in meta:
            raise CorruptHeaderError(f"{clip_dir}: frames/ variant needs frame_rate in meta.json")
        files = sorted(frame_dir.glob("*.png"))
        if not files:
            raise DataError(f"{clip_dir}: frames/ is empty")
        frames = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
        return frames, float(meta["frame_rate"])
    raise DataError(f"{clip_dir}: no frames.bin or frames/ directory")


def _read_meta(clip_dir: Path) -> dict:
    p = clip_dir / "meta.json"
    if not p.exists():
        return {}
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptHeaderError(f"{p}: {exc}") from exc


@dataclass
class DatasetIndex:
    root: Path
    entries: list[ClipEntry]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def subset(self, split: str | None) -> list[ClipEntry]:
        if split is None or split == "all":
            return list(self.entries)
        if split not in self.splits:
            raise DataError(f"no split named {split!r}")
        return [self.entries[i] for i in self.splits[split]]

    def assign_splits(self, fractions: dict[str, float], seed: int = 0) -> None:
        """Subject-disjoint random split; fractions are normalised to sum to one."""
        subjects = sorted({e.subject for e in self.entries})
        rng = np.random.default_rng(seed)
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        total = sum(fractions.values())
        bounds = np.cumsum([f / total for f in fractions.values()]) * len(order)
        cuts = [0, *np.round(bounds).astype(int)]
        which = {}
        for (name, _), lo, hi in zip(fractions.items(), cuts[:-1], cuts[1:]):
            for s in order[lo:hi]:
                which[s] = name
        self.splits = {name: [i for i, e in enumerate(self.entries) if which.get(e.subject) == name]
                       for name in fractions}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(e.name.encode())
            for f in sorted(e.path.rglob("*")):
                if f.is_file() and f.name != "meta.json":
                    h.update(f.read_bytes())
        return h.hexdigest()[:16]


def ingest(root: str | Path) -> DatasetIndex:
    """Index every clip directory under ``root`` and validate headers and ground truth."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    entries = []
    for clip_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        gt = clip_dir / "gt.csv"
        if not gt.exists():
            raise MissingGroundTruthError(f"clip {clip_dir.name}: missing gt.csv")
        meta = _read_meta(clip_dir)
        if (clip_dir / "frames.bin").exists():
            (n, *_), _, fps = read_frames_header(clip_dir / "frames.bin")
        else:
            frames, fps = _load_frames(clip_dir)
            n = len(frames)
        if "frame_rate" in meta and abs(float(meta["frame_rate"]) - fps) > 1e-6:
            raise RateMismatchError(f"clip {clip_dir.name}: header says {fps} fps, meta.json {meta['frame_rate']}")
        t, v = read_gt_csv(gt)
        resample_gt(t, v, n, fps, clip_dir.name)
        tags = {k: meta[k] for k in ("hr_bpm", "noise_sigma", "tags") if k in meta}
        entries.append(ClipEntry(clip_dir.name, clip_dir, fps, n, gt, str(meta.get("subject", clip_dir.name)), tags))
    if not entries:
        raise DataError(f"{root}: no clip directories")
    return DatasetIndex(root, entries)


def window_starts(n_frames: int, length: int, stride: int) -> list[int]:
    if n_frames < length:
        return []
    return list(range(0, n_frames - length + 1, stride))


def window_clip(frames, gt, length: int, stride: int) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Sliding (start, frames, gt) windows; the trailing remainder is dropped."""
    if len(gt) != len(frames):
        raise ValueError(f"{len(frames)} frames but {len(gt)} ground-truth samples")
    starts = window_starts(len(frames), length, stride)
    if not starts:
        log.warning("clip of %d frames is shorter than one %d-frame window; skipped", len(frames), length)
    return [(s, frames[s:s + length], gt[s:s + length]) for s in starts]


RoiProvider = Callable[[np.ndarray], tuple[int, int, int]]


def center_square(frames: np.ndarray) -> tuple[int, int, int]:
    """(top, left, side) of the largest centred square."""
    h, w = frames.shape[1:3]
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side


def preprocess(window: np.ndarray, size: tuple[int, int], roi: RoiProvider | None = None) -> torch.Tensor:
    """(T, H, W, 3) uint8 frames -> (3, T, h, w) float32 in [0, 1].

    Crops the ROI given by ``roi`` (falls back to a centred square if it fails),
    then resizes bilinearly.
    """
    window = np.asarray(window)
    try:
        top, left, side = (roi or center_square)(window)
        if side <= 0 or top < 0 or left < 0 or top + side > window.shape[1] or left + side > window.shape[2]:
            raise ValueError(f"ROI {(top, left, side)} outside frame {window.shape[1:3]}")
    except Exception as exc:  # any provider failure degrades to the default crop
        log.warning("ROI provider failed (%s); using centre crop", exc)
        top, left, side = center_square(window)
    crop = window[:, top:top + side, left:left + side]
    x = torch.from_numpy(np.ascontiguousarray(crop)).to(torch.float32).permute(0, 3, 1, 2) / 255.0
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return x.permute(1, 0, 2, 3).contiguous()


def standardize(y: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance copy (constant input maps to zeros)."""
    y = np.asarray(y, dtype=float)
    sd = y.std()
    return (y - y.mean()) / sd if sd > 0 else np.zeros_like(y)
