"""Train on synthetic clips and report HR error on held-out clips.

    python3 scripts/generalization.py --steps 1500 --out runs/gen
"""
import argparse
import logging
import tempfile
import time
from pathlib import Path

import torch

from vidformer.config import get_profile
from vidformer.dataio import ingest
from vidformer.evaluation import evaluate, write_report
from vidformer.skinsim import DatasetSpec, make_dataset
from vidformer.training import TrainSettings, train

MODERATE = dict(noise_range=(1.0, 3.0), illum_amplitude_range=(0.0, 0.1))


def datasets(root, n_train=64, n_test=16, duration=10.0, seed=0, **scene):
    scene = {**MODERATE, **scene}
    tr = make_dataset(Path(root) / "train", DatasetSpec(n_clips=n_train, duration=duration, seed=seed, **scene))
    te = make_dataset(Path(root) / "test", DatasetSpec(n_clips=n_test, duration=duration, seed=seed + 1000, **scene))
    return ingest(tr), ingest(te)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ablate", default="", help="comma-separated ablation flags")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    torch.set_num_threads(1)
    with tempfile.TemporaryDirectory() as tmp:
        train_idx, test_idx = datasets(tmp, seed=args.seed)
        cfg = get_profile("test").replace(ablate=frozenset(f for f in args.ablate.split(",") if f))
        t0 = time.time()
        res = train(cfg, train_idx, TrainSettings(lr_max=args.lr, steps=args.steps, seed=args.seed), args.out)
        rep = evaluate(res.model, test_idx, cfg, train_data=train_idx.fingerprint())
        print(f"train {time.time() - t0:.0f}s  MAE {rep.mae:.2f}  RMSE {rep.rmse:.2f}  r {rep.r:.3f}  "
              f"failed windows {rep.n_failed_windows}")
        if args.out:
            write_report(rep, args.out)


if __name__ == "__main__":
    main()
