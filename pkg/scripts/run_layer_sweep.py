"""Tap-layer sweep: one nam run per encoder block, plus the unmasked
baseline, written as a plot-ready CSV."""

import argparse
import pathlib
import sys

from namtde.corpus import load_dataset
from namtde.evaluation import ablate, save_ablation_csv
from namtde.trainer import TrainConfig


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True, type=pathlib.Path)
    parser.add_argument("--out", required=True, type=pathlib.Path)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    args = parser.parse_args(argv)

    dataset = load_dataset(args.data)
    base = TrainConfig(epochs=args.epochs)
    layers = list(range(1, base.encoder.depth + 1))
    rows = ablate(dataset, base, "layer", layers, seeds=(args.seed,))
    rows += ablate(dataset, base, "mask_mode", ("none",), seeds=(args.seed,))
    save_ablation_csv(args.out, rows)
    for row in rows:
        print(f"layer={row.sweep_value:>4} rank1={row.rank1:.4f} auc={row.auc:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
