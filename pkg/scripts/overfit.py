"""Fit 8 synthetic clips and report the per-head Pearson loss on them.

    python3 scripts/overfit.py --steps 300
"""
import argparse
import logging
import tempfile
import time

import torch

from vidformer.config import get_profile
from vidformer.dataio import ingest
from vidformer.skinsim import DatasetSpec, make_dataset
from vidformer.training import ClipBank, TrainSettings, head_pearson_losses, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ablate", default="")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    torch.set_num_threads(1)
    with tempfile.TemporaryDirectory() as tmp:
        index = ingest(make_dataset(tmp, DatasetSpec(n_clips=8, duration=5.0, seed=1)))
        cfg = get_profile("test").replace(ablate=frozenset(f for f in args.ablate.split(",") if f))
        t0 = time.time()
        res = train(cfg, index, TrainSettings(lr_max=args.lr, steps=args.steps, seed=args.seed))
        lp = head_pearson_losses(res.model, ClipBank(index.entries, cfg))
    print(f"{time.time() - t0:.0f}s  " + "  ".join(f"L_p({k})={v:.4f}" for k, v in lp.items()))


if __name__ == "__main__":
    main()
