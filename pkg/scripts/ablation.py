"""Ablation table under the generalization protocol (shared data and seed).

    python3 scripts/ablation.py --steps 2240 --flags GA S-MHSA LCB C-TB --out runs/abl
"""
import argparse
import logging
import tempfile

import torch

from generalization import datasets
from vidformer.config import get_profile
from vidformer.evaluation import ablate, format_ablation_table
from vidformer.training import TrainSettings


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2240)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--flags", nargs="+", default=["GA", "S-MHSA", "LCB", "C-TB"],
                    help="each entry is one variant; join flags with '+' to drop several at once")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    torch.set_num_threads(1)
    variants = [()] + [tuple(f.split("+")) for f in args.flags]
    with tempfile.TemporaryDirectory() as tmp:
        train_idx, test_idx = datasets(tmp, seed=args.seed)
        runs = ablate(get_profile("test"), variants, train_idx, test_idx,
                      TrainSettings(lr_max=args.lr, steps=args.steps, seed=args.seed), args.out)
    print(format_ablation_table(runs))


if __name__ == "__main__":
    main()
