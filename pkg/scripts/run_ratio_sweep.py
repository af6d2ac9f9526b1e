"""Masking-ratio sweep: nam vs em across overall ratios, one CSV per mode
pair so the curves can be plotted against each other."""

import argparse
import pathlib
import sys
from dataclasses import replace

from namtde.corpus import load_dataset
from namtde.evaluation import ablate, save_ablation_csv
from namtde.nam import NamConfig
from namtde.trainer import TrainConfig


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True, type=pathlib.Path)
    parser.add_argument("--out", required=True, type=pathlib.Path)
    parser.add_argument("--ratios", type=str, default="0.05,0.15,0.3")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    args = parser.parse_args(argv)

    dataset = load_dataset(args.data)
    ratios = [float(r) for r in args.ratios.split(",")]
    rows = []
    for mode in ("nam", "em"):
        base = TrainConfig(epochs=args.epochs, mask_mode=mode)
        for row in ablate(dataset, base, "ratio", ratios, seeds=(args.seed,)):
            rows.append(replace(row, sweep_value=f"{mode}@{row.sweep_value}"))
    save_ablation_csv(args.out, rows)
    for row in rows:
        print(f"{row.sweep_value:>10} rank1={row.rank1:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
