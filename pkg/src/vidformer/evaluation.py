"""Clip-level HR evaluation, Bland-Altman analysis, cross-dataset and ablation runs."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, profile_windowing
from .dataio import ClipEntry, DatasetIndex
from .model import VidFormer, hr_from_heads
from .sigproc import PeakDetectionError, detect_peaks, estimate_hr, estimate_rf, hrv_metrics, pearson_r
from .training import ClipBank, TrainSettings, train

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("tag", "train_data", "test_data", "n_clips", "n_failed_clips", "n_failed_windows",
                  "mae", "rmse", "r", "std")
CLIP_COLUMNS = ("clip", "hr_gt", "hr_et", "n_windows", "n_failed_windows")


@dataclass
class ClipRecord:
    name: str
    hr_gt: float
    hr_et: float
    n_windows: int
    n_failed: int
    hrv: dict = field(default_factory=dict)


@dataclass
class MetricReport:
    mae: float
    rmse: float
    r: float
    std: float
    records: list[ClipRecord]
    n_failed_clips: int = 0
    n_failed_windows: int = 0
    tag: str = ""
    train_data: str = ""
    test_data: str = ""
    hrv: dict = field(default_factory=dict)

    @property
    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        ok = [r for r in self.records if np.isfinite(r.hr_et)]
        return np.array([r.hr_gt for r in ok]), np.array([r.hr_et for r in ok])

    def row(self) -> dict:
        return {"tag": self.tag, "train_data": self.train_data, "test_data": self.test_data,
                "n_clips": len(self.records), "n_failed_clips": self.n_failed_clips,
                "n_failed_windows": self.n_failed_windows,
                "mae": self.mae, "rmse": self.rmse, "r": self.r, "std": self.std}


def error_metrics(hr_gt, hr_et) -> tuple[float, float, float, float]:
    """MAE, RMSE, Pearson r and the (population) std of the errors."""
    gt = np.asarray(hr_gt, dtype=float)
    et = np.asarray(hr_et, dtype=float)
    if len(gt) == 0:
        nan = float("nan")
        return nan, nan, nan, nan
    err = et - gt
    return (float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2))),
            pearson_r(gt, et), float(np.std(err)))


def bland_altman(hr_gt, hr_et) -> dict:
    """Pairs (mean, difference) and the bias with 95% limits, bias +/- 1.96 * sample std."""
    gt = np.asarray(hr_gt, dtype=float)
    et = np.asarray(hr_et, dtype=float)
    diff = et - gt
    mean = (et + gt) / 2
    if len(diff) == 0:
        nan = float("nan")
        return {"mean": mean, "diff": diff, "bias": nan, "sd": nan, "lower": nan, "upper": nan}
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1)) if len(diff) > 1 else 0.0
    return {"mean": mean, "diff": diff, "bias": bias, "sd": sd,
            "lower": bias - 1.96 * sd, "upper": bias + 1.96 * sd}


@torch.no_grad()
def predict_windows(model: VidFormer, frames: torch.Tensor, starts: list[int], length: int):
    """Yield (start, r1, r2) numpy waveforms for each window of a preprocessed clip."""
    model.eval()
    for s in starts:
        r1, r2 = model(frames[None, :, s:s + length])
        yield s, (None if r1 is None else r1[0].double().numpy()), (None if r2 is None else r2[0].double().numpy())


def _clip_hrv(pred: np.ndarray, gt: np.ndarray, rate: float) -> dict:
    out = {}
    for label, sig in (("et", pred), ("gt", gt)):
        ibi = detect_peaks(sig, rate)
        m = hrv_metrics(ibi)
        out[label] = {"lf_nu": m.lf_nu, "hf_nu": m.hf_nu, "ratio": m.ratio, "rf": estimate_rf(ibi).hz}
    return out


def evaluate(model: VidFormer, data: DatasetIndex | list[ClipEntry], cfg: ModelConfig | None = None,
             split: str | None = None, tag: str = "", train_data: str = "") -> MetricReport:
    """Per-window HR from both heads, averaged per clip, compared with the ground-truth HR.

    Ground-truth HR is measured on the same windows with the same estimator.
    Windows where peak detection fails are dropped and counted.
    """
    cfg = cfg or model.cfg
    entries = data if isinstance(data, list) else data.subset(split)
    bank = ClipBank(entries, cfg)
    length, _ = profile_windowing(cfg)
    rate = cfg.frame_rate
    records, failed_windows = [], 0
    hrv_rows = []
    for i, name in enumerate(bank.names):
        hr_et, hr_gt, failed = [], [], 0
        for s, r1, r2 in predict_windows(model, bank.frames[i], bank.starts[i], length):
            gt_w = bank.gt[i][s:s + length]
            try:
                hr_gt.append(estimate_hr(gt_w, rate))
            except PeakDetectionError:
                log.warning("clip %s window %d: no HR in ground truth", name, s)
                failed += 1
                continue
            try:
                hr_et.append(hr_from_heads(r1, r2, rate))
            except PeakDetectionError:
                hr_gt.pop()
                failed += 1
                continue
            if length / rate >= 30.0:
                try:
                    est = r1 if r2 is None else (r2 if r1 is None else (r1 + r2) / 2)
                    hrv_rows.append(_clip_hrv(est, gt_w, rate))
                except (PeakDetectionError, ValueError) as exc:
                    log.warning("clip %s window %d: HRV skipped (%s)", name, s, exc)
        failed_windows += failed
        et = float(np.mean(hr_et)) if hr_et else float("nan")
        gt = float(np.mean(hr_gt)) if hr_gt else float("nan")
        records.append(ClipRecord(name, gt, et, len(bank.starts[i]), failed))
    ok = [r for r in records if np.isfinite(r.hr_et) and np.isfinite(r.hr_gt)]
    n_failed_clips = len(records) - len(ok)
    if n_failed_clips or failed_windows:
        log.warning("%d clip(s) and %d window(s) excluded after peak-detection failure",
                    n_failed_clips, failed_windows)
    mae, rmse, r, std = error_metrics([c.hr_gt for c in ok], [c.hr_et for c in ok])
    test_fp = data.fingerprint() if isinstance(data, DatasetIndex) else "unindexed"
    return MetricReport(mae, rmse, r, std, records, n_failed_clips, failed_windows, tag, train_data, test_fp,
                        _hrv_summary(hrv_rows))


def _hrv_summary(rows: list[dict]) -> dict:
    if not rows:
        return {}
    out = {}
    for key in ("lf_nu", "hf_nu", "ratio", "rf"):
        gt = np.array([r["gt"][key] for r in rows])
        et = np.array([r["et"][key] for r in rows])
        err = et - gt
        out[key] = {"std": float(np.std(err)), "rmse": float(np.sqrt(np.mean(err ** 2))), "r": pearson_r(gt, et)}
    return out


def cross_evaluate(model: VidFormer, data: DatasetIndex, train_data: str, split: str | None = None) -> MetricReport:
    """Evaluate without adaptation, tagging the report ``train->test``."""
    report = evaluate(model, data, split=split, train_data=train_data)
    report.tag = f"{train_data}->{report.test_data}"
    return report


def _fmt(v):
    return f"{v:.9g}" if isinstance(v, float) else v


def write_report(report: MetricReport, out_dir: str | Path, prefix: str = "") -> dict[str, Path]:
    """metrics.csv, per_clip.csv, scatter.csv, bland_altman.csv and bland_altman_limits.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{prefix}{k}.csv" for k in
             ("metrics", "per_clip", "scatter", "bland_altman", "bland_altman_limits")}
    with open(paths["metrics"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        w.writerow({k: _fmt(v) for k, v in report.row().items()})
    with open(paths["per_clip"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CLIP_COLUMNS)
        for c in report.records:
            w.writerow([c.name, _fmt(c.hr_gt), _fmt(c.hr_et), c.n_windows, c.n_failed])
    gt, et = report.pairs
    with open(paths["scatter"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("hr_gt", "hr_et"))
        w.writerows((_fmt(float(a)), _fmt(float(b))) for a, b in zip(gt, et))
    write_bland_altman(bland_altman(gt, et), paths["bland_altman"], paths["bland_altman_limits"])
    if report.hrv:
        paths["hrv"] = out / f"{prefix}hrv.csv"
        with open(paths["hrv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("metric", "std", "rmse", "r"))
            for key, v in report.hrv.items():
                w.writerow((key, _fmt(v["std"]), _fmt(v["rmse"]), _fmt(v["r"])))
    return paths


def write_bland_altman(ba: dict, pairs_path: str | Path, limits_path: str | Path) -> None:
    with open(pairs_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("mean", "diff"))
        w.writerows((repr(float(m)), repr(float(d))) for m, d in zip(ba["mean"], ba["diff"]))
    with open(limits_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("n", "bias", "sd", "lower", "upper"))
        w.writerow((len(ba["diff"]), repr(ba["bias"]), repr(ba["sd"]), repr(ba["lower"]), repr(ba["upper"])))


ABLATION_ROWS = {
    (): "Full model",
    ("GA",): "Without GA",
    ("S-GA",): "Without S-GA",
    ("T-GA",): "Without T-GA",
    ("S-MHSA",): "Without S-MHSA",
    ("T-MHSA",): "Without T-MHSA",
    ("LCB",): "Without LCB",
    ("GTB",): "Without GTB",
    ("C-TB",): "Without C-TB",
    ("T-CB",): "Without T-CB",
}


def ablation_label(flags) -> str:
    key = tuple(sorted(flags))
    return ABLATION_ROWS.get(key, "Without " + " + ".join(key))


@dataclass
class AblationRun:
    flags: tuple[str, ...]
    label: str
    report: MetricReport


def ablate(cfg: ModelConfig, variants, train_data: DatasetIndex, test_data: DatasetIndex,
           settings: TrainSettings, out_dir: str | Path | None = None,
           cache: dict | None = None) -> list[AblationRun]:
    """Train and evaluate each flag set with the same seed and data.

    ``cache`` maps a flag tuple to an already-computed :class:`AblationRun`.
    """
    runs = []
    for flags in variants:
        flags = tuple(sorted(flags))
        if cache is not None and flags in cache:
            runs.append(cache[flags])
            continue
        vcfg = cfg.replace(ablate=frozenset(cfg.ablate) | set(flags))
        sub = None if out_dir is None else Path(out_dir) / ("full" if not flags else "wo-" + "+".join(flags))
        res = train(vcfg, train_data, settings, sub, split=None)
        report = evaluate(res.model, test_data, vcfg, tag=ablation_label(flags),
                          train_data=train_data.fingerprint())
        run = AblationRun(flags, ablation_label(flags), report)
        if cache is not None:
            cache[flags] = run
        runs.append(run)
    if out_dir is not None:
        write_ablation_table(runs, Path(out_dir) / "ablation.csv")
    return runs


def write_ablation_table(runs: list[AblationRun], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant", "flags", "mae", "rmse", "r", "n_failed_windows"))
        for run in runs:
            rep = run.report
            w.writerow((run.label, "+".join(run.flags), _fmt(rep.mae), _fmt(rep.rmse), _fmt(rep.r),
                        rep.n_failed_windows))


def format_ablation_table(runs: list[AblationRun]) -> str:
    lines = [f"{'variant':<20} {'MAE':>8} {'RMSE':>8} {'r':>7}"]
    for run in runs:
        rep = run.report
        lines.append(f"{run.label:<20} {rep.mae:8.3f} {rep.rmse:8.3f} {rep.r:7.3f}")
    return "\n".join(lines)
