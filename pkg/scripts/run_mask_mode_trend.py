"""Mask-mode trend experiment: trains nam/em/none over several seeds on a
dataset and writes one CSV row per run (rank metrics + noise AUC)."""

import argparse
import pathlib
import sys

from namtde.corpus import load_dataset
from namtde.evaluation import ablate
from namtde.trainer import TrainConfig


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True, type=pathlib.Path)
    parser.add_argument("--out", required=True, type=pathlib.Path)
    parser.add_argument("--seeds", type=str, default="0,1,2")
    parser.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    parser.add_argument("--batch", type=int, default=TrainConfig.batch_size)
    args = parser.parse_args(argv)

    dataset = load_dataset(args.data)
    base = TrainConfig(epochs=args.epochs, batch_size=args.batch)
    rows = ablate(
        dataset,
        base,
        "mask_mode",
        ("nam", "em", "none"),
        seeds=[int(s) for s in args.seeds.split(",")],
        out_csv=args.out,
    )
    for row in rows:
        print(f"{row.sweep_value:>5} seed={row.seed} rank1={row.rank1:.4f} map={row.mean_ap:.4f} auc={row.auc:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
