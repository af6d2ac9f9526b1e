"""Reference run used to calibrate desk-scale defaults: trains the three mask
modes on the default corpus and reports held-out metrics plus noise AUC."""

import argparse
import json
import pathlib
import sys
import tempfile
import time

from namtde.corpus import gen_corpus, load_dataset
from namtde.evaluation import evaluate, noise_detection, untrained_state
from namtde.trainer import TrainConfig, train


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", type=pathlib.Path, default=None)
    parser.add_argument("--identities", type=int, default=500)
    parser.add_argument("--epochs", type=int, default=240)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--noise-rate", type=float, default=0.3)
    parser.add_argument("--seeds", type=str, default="0")
    parser.add_argument("--modes", type=str, default="nam,em,none")
    parser.add_argument("--mlm", action="store_true")
    args = parser.parse_args(argv)

    if args.data and args.data.exists():
        ds = load_dataset(args.data)
    else:
        out = args.data or pathlib.Path(tempfile.mkdtemp()) / "ds"
        ds = gen_corpus(out, n_identities=args.identities, noise_rate=args.noise_rate, seed=0)
        print(f"corpus at {out}: {len(ds.images)} images, {len(ds.captions)} captions", flush=True)

    seeds = [int(s) for s in args.seeds.split(",")]
    for mode in args.modes.split(","):
        for seed in seeds:
            cfg = TrainConfig(
                epochs=args.epochs,
                batch_size=args.batch,
                learning_rate=args.lr,
                mask_mode=mode,
                mlm_enabled=args.mlm,
                seed=seed,
            )
            t0 = time.time()
            state = train(ds, cfg, audit_table=False)
            train_s = time.time() - t0
            result = evaluate(state, ds)
            report = noise_detection(state, ds)
            base = noise_detection(untrained_state(ds, cfg), ds)
            first = [r.loss_sdm for r in state.loss_trace if r.epoch == 1]
            last = [r.loss_sdm for r in state.loss_trace if r.epoch == state.epoch]
            print(
                json.dumps(
                    {
                        "mode": mode,
                        "mlm": args.mlm,
                        "seed": seed,
                        "train_s": round(train_s, 1),
                        "loss_first": round(sum(first) / len(first), 3),
                        "loss_last": round(sum(last) / len(last), 3),
                        "rank1": round(result.rank1, 4),
                        "rank5": round(result.rank5, 4),
                        "map": round(result.mean_ap, 4),
                        "auc": round(report.auc, 4),
                        "auc_untrained": round(base.auc, 4),
                        "r_noise": round(report.mean_noise_level_noisy, 4),
                        "r_clean": round(report.mean_noise_level_clean, 4),
                    }
                ),
                flush=True,
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
