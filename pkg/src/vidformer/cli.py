"""Command-line entry point: ``vidformer {synth,train,eval,xeval,ablate,infer,metrics}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, DataError, DivergenceError, ModelConfig, get_profile, load_config, save_config

log = logging.getLogger("vidformer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
DEFAULT_ABLATIONS = "GA;S-MHSA;LCB;C-TB"


def _cfg(args) -> ModelConfig:
    cfg = load_config(args.config) if args.config else get_profile(args.profile)
    return cfg.replace(seed=args.seed) if args.seed is not None else cfg


def _settings(args, cfg: ModelConfig):
    from .training import TrainSettings

    if args.steps is None and args.epochs is None:
        raise ConfigError("train needs --steps or --epochs")
    return TrainSettings(lr_max=args.lr, lr_min=args.lr_min, steps=args.steps, epochs=args.epochs,
                         seed=cfg.seed, checkpoint_every=args.checkpoint_every)


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")


def cmd_synth(args) -> None:
    from .skinsim import DatasetSpec, make_dataset

    _require(args, "out")
    cfg = get_profile(args.profile)
    ds = DatasetSpec(n_clips=args.n_clips, duration=args.duration, rate=cfg.frame_rate,
                     height=args.size or cfg.height, width=args.size or cfg.width,
                     hr_range=tuple(args.hr_range), noise_range=tuple(args.noise),
                     illum_amplitude_range=(0.0, args.illum), seed=args.seed or 0)
    make_dataset(args.out, ds)
    print(f"wrote {ds.n_clips} clips to {args.out}")


def cmd_train(args) -> None:
    from .dataio import ingest
    from .training import train

    _require(args, "data", "out")
    cfg = _cfg(args)
    index = ingest(args.data)
    res = train(cfg, index, _settings(args, cfg), args.out, split=None)
    save_config(cfg, Path(args.out) / "config.txt")
    last = res.log_rows[-1]
    print(f"trained {res.steps} steps; final loss {last['loss']:.4f}; checkpoint {Path(args.out) / 'model.pt'}")


def _report(report, out: Path) -> None:
    from .evaluation import write_report

    write_report(report, out)
    print(f"{report.tag or 'eval'}: MAE {report.mae:.3f} bpm, RMSE {report.rmse:.3f} bpm, r {report.r:.4f} "
          f"({len(report.records)} clips, {report.n_failed_windows} failed windows)")


def cmd_eval(args, cross: bool = False) -> None:
    from .dataio import ingest
    from .evaluation import cross_evaluate, evaluate
    from .model import load_checkpoint

    _require(args, "ckpt", "data", "out")
    cfg = load_config(args.config) if args.config else None
    model, state = load_checkpoint(args.ckpt, cfg)
    index = ingest(args.data)
    train_fp = state.get("train_data", "")
    if cross:
        report = cross_evaluate(model, index, train_fp)
    else:
        report = evaluate(model, index, tag="eval", train_data=train_fp)
    _report(report, Path(args.out))


def cmd_ablate(args) -> None:
    from .dataio import ingest
    from .evaluation import ablate, format_ablation_table

    _require(args, "data", "eval_data", "out")
    cfg = _cfg(args)
    variants = [()] + [tuple(f.split("+")) for f in args.flags.split(";") if f]
    runs = ablate(cfg, variants, ingest(args.data), ingest(args.eval_data), _settings(args, cfg), args.out)
    print(format_ablation_table(runs))


def cmd_infer(args) -> None:
    from .config import profile_windowing
    from .dataio import _load_frames, preprocess, window_starts
    from .evaluation import predict_windows
    from .model import hr_from_heads, load_checkpoint
    from .sigproc import PeakDetectionError, write_waveform_csv

    _require(args, "ckpt", "clip", "out")
    model, _ = load_checkpoint(args.ckpt)
    cfg = model.cfg
    frames, fps = _load_frames(Path(args.clip))
    if abs(fps - cfg.frame_rate) > 1e-6:
        raise DataError(f"clip runs at {fps} fps but the checkpoint expects {cfg.frame_rate}")
    length, stride = profile_windowing(cfg)
    starts = window_starts(len(frames), length, stride)
    if not starts:
        raise DataError(f"clip has {len(frames)} frames, fewer than one {length}-frame window")
    x = preprocess(frames, (cfg.height, cfg.width))
    acc = np.zeros(len(frames))
    cnt = np.zeros(len(frames))
    hrs = []
    for s, r1, r2 in predict_windows(model, x, starts, length):
        heads = [(h - h.mean()) / (h.std() or 1.0) for h in (r1, r2) if h is not None]
        acc[s:s + length] += np.mean(heads, axis=0)
        cnt[s:s + length] += 1
        try:
            hrs.append(hr_from_heads(r1, r2, fps))
        except PeakDetectionError:
            pass
    covered = cnt > 0
    wave = acc[covered] / cnt[covered]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_waveform_csv(out, wave, fps, "bvp")
    hr = f"{np.mean(hrs):.2f} bpm" if hrs else "unavailable (no detectable peaks)"
    print(f"wrote {len(wave)} samples to {out}; HR {hr}")


def cmd_metrics(args) -> None:
    from .evaluation import ClipRecord, MetricReport, error_metrics, write_report
    from .sigproc import PeakDetectionError, estimate_hr, read_waveform_csv

    _require(args, "out")
    if len(args.pairs) % 2:
        raise ConfigError("metrics expects GT PRED waveform CSV pairs")
    records, failed = [], 0
    for gt_path, pred_path in zip(args.pairs[::2], args.pairs[1::2]):
        try:
            gt, pred = read_waveform_csv(gt_path), read_waveform_csv(pred_path)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        try:
            hr_gt, hr_et = estimate_hr(gt.samples, gt.rate), estimate_hr(pred.samples, pred.rate)
        except PeakDetectionError:
            failed += 1
            hr_gt, hr_et = float("nan"), float("nan")
        records.append(ClipRecord(Path(pred_path).stem, hr_gt, hr_et, 1, int(np.isnan(hr_et))))
    ok = [r for r in records if np.isfinite(r.hr_et)]
    mae, rmse, r, std = error_metrics([c.hr_gt for c in ok], [c.hr_et for c in ok])
    _report(MetricReport(mae, rmse, r, std, records, failed, failed, "metrics"), Path(args.out))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidformer", description="rPPG dual-branch network toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, train_opts=False):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--data", type=Path)
        sp.add_argument("--ckpt", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--profile", choices=("paper", "test"), default="test")
        sp.add_argument("--out", type=Path)
        if train_opts:
            sp.add_argument("--steps", type=int)
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--lr", type=float, default=8e-5)
            sp.add_argument("--lr-min", type=float, default=2e-9)
            sp.add_argument("--checkpoint-every", type=int, default=0)
        return sp

    sp = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    sp.add_argument("--n-clips", type=int, default=8)
    sp.add_argument("--duration", type=float, default=20.0)
    sp.add_argument("--size", type=int, help="frame side in pixels (default: profile resolution)")
    sp.add_argument("--hr-range", type=float, nargs=2, default=(48.0, 150.0))
    sp.add_argument("--noise", type=float, nargs=2, default=(0.0, 0.0), metavar=("LO", "HI"))
    sp.add_argument("--illum", type=float, default=0.0, help="max illumination modulation amplitude")
    sp.set_defaults(func=cmd_synth)

    common(sub.add_parser("train", help="train a model"), train_opts=True).set_defaults(func=cmd_train)
    common(sub.add_parser("eval", help="evaluate a checkpoint")).set_defaults(func=cmd_eval)
    common(sub.add_parser("xeval", help="cross-dataset evaluation")).set_defaults(
        func=lambda a: cmd_eval(a, cross=True))
    sp = common(sub.add_parser("ablate", help="train/evaluate ablated variants"), train_opts=True)
    sp.add_argument("--eval-data", type=Path)
    sp.add_argument("--flags", default=DEFAULT_ABLATIONS,
                    help="';'-separated flag sets, '+' joins flags within a set")
    sp.set_defaults(func=cmd_ablate)
    sp = common(sub.add_parser("infer", help="estimate the waveform of one clip"))
    sp.add_argument("--clip", type=Path)
    sp.set_defaults(func=cmd_infer)
    sp = common(sub.add_parser("metrics", help="HR metrics from GT/prediction waveform CSV pairs"))
    sp.add_argument("pairs", nargs="*", type=Path)
    sp.set_defaults(func=cmd_metrics)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
