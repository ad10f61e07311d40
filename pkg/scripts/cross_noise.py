"""Train at one noise level and evaluate at another (cross-dataset style).

    python3 scripts/cross_noise.py --train-noise 0 1 --test-noise 3 5 --steps 2240
"""
import argparse
import logging
import tempfile
from pathlib import Path

import torch

from vidformer.config import get_profile
from vidformer.dataio import ingest
from vidformer.evaluation import cross_evaluate
from vidformer.skinsim import DatasetSpec, make_dataset
from vidformer.training import TrainSettings, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-noise", type=float, nargs=2, default=(0.0, 1.0))
    ap.add_argument("--test-noise", type=float, nargs=2, default=(3.0, 5.0))
    ap.add_argument("--steps", type=int, default=2240)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    torch.set_num_threads(1)
    with tempfile.TemporaryDirectory() as tmp:
        tr = ingest(make_dataset(Path(tmp) / "a", DatasetSpec(n_clips=64, duration=10.0, seed=args.seed,
                                                              noise_range=tuple(args.train_noise))))
        te = ingest(make_dataset(Path(tmp) / "b", DatasetSpec(n_clips=16, duration=10.0, seed=args.seed + 1000,
                                                              noise_range=tuple(args.test_noise))))
        cfg = get_profile("test")
        model = train(cfg, tr, TrainSettings(lr_max=args.lr, steps=args.steps, seed=args.seed)).model
        for name, idx in (("same", tr), ("cross", te)):
            rep = cross_evaluate(model, idx, train_data=tr.fingerprint())
            print(f"{name:<6} {rep.tag}  MAE {rep.mae:.2f}  RMSE {rep.rmse:.2f}  r {rep.r:.3f}")


if __name__ == "__main__":
    main()
