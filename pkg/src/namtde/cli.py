"""Command-line entry point: corpus generation, caption building, training,
evaluation, ablation sweeps, and per-token noise inspection.

Exit codes: 0 success, 1 contract violation (including usage errors),
2 I/O or transport failure. Every run is fully determined by --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .corpus import gen_corpus, load_dataset
from .errors import (
    ContractViolation,
    CorruptionError,
    FormatError,
    NumericInputError,
    ProtocolError,
    TransportError,
)
from .evaluation import (
    ablate,
    caption_noise_scores,
    evaluate,
    noise_detection,
    save_ablation_csv,
)
from .nam import NamConfig
from .losses import SdmConfig
from .tde import (
    CaptionerEndpoint,
    caption_image,
    dynamic_instruction,
    load_template_bank,
    mock_caption,
    save_captions,
    static_instruction,
)
from .trainer import TrainConfig, checkpoint_load, save_trace, train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="namtde",
        description="Dual-encoder retrieval training with noise-aware masking and template-diverse captions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic oracle dataset")
    p.add_argument("--out", required=True, type=Path, help="output dataset directory")
    p.add_argument("--identities", type=int, default=500, help="number of identities")
    p.add_argument("--images-per-identity", type=int, default=2)
    p.add_argument("--captions-per-image", type=int, default=4)
    p.add_argument("--noise-rate", type=float, default=0.3, help="per-slot distractor probability")
    p.add_argument("--patches", type=int, default=12, help="patch tokens per image")
    p.add_argument("--patch-dim", type=int, default=32, help="patch feature width")
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build-captions", help="caption a dataset's images")
    p.add_argument("--data", required=True, type=Path, help="dataset directory")
    p.add_argument("--out", required=True, type=Path, help="captions JSONL to write")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--mock", action="store_true", help="use the deterministic local captioner")
    group.add_argument("--endpoint", type=str, help="base URL of a remote captioner")
    p.add_argument("--bank", type=Path, default=None, help="template bank file (default: built-in)")
    p.add_argument("--noise-rate", type=float, default=0.3, help="mock captioner noise rate")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="checkpoint directory")
    p.add_argument("--config", type=Path, default=None, help="JSON file of run settings")
    p.add_argument("--mask-mode", choices=("nam", "em", "none"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--mask-ratio", type=float, default=None, help="average masking ratio")
    p.add_argument("--tap-layer", type=int, default=None)
    p.add_argument("--tau", type=float, default=None, help="softmax temperature")
    p.add_argument("--mlm", action="store_true", help="add the masked-word prediction loss")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out identities")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", type=Path, default=None, help="metrics CSV to write")
    p.add_argument("--split", choices=("test", "train"), default="test")

    p = sub.add_parser("ablate", help="train one run per sweep value and emit a CSV")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--sweep", required=True, choices=("mask_mode", "layer", "ratio", "mlm"))
    p.add_argument("--values", type=str, default=None, help="comma-separated sweep values")
    p.add_argument("--seeds", type=str, default="0", help="comma-separated seeds")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--no-auc", action="store_true", help="skip noise-detection AUC per run")

    p = sub.add_parser("inspect-noise", help="per-token noise table for one caption")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--caption-id", required=True, type=str)

    return parser


def _train_config(args) -> TrainConfig:
    raw = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    cfg = TrainConfig(
        epochs=raw.get("epochs", TrainConfig.epochs),
        batch_size=raw.get("batch_size", TrainConfig.batch_size),
        learning_rate=raw.get("learning_rate", TrainConfig.learning_rate),
        mask_mode=raw.get("mask_mode", TrainConfig.mask_mode),
        mlm_enabled=raw.get("mlm_enabled", TrainConfig.mlm_enabled),
        seed=raw.get("seed", TrainConfig.seed),
        weight_decay=raw.get("weight_decay", TrainConfig.weight_decay),
        grad_clip=raw.get("grad_clip", TrainConfig.grad_clip),
        nam=NamConfig(**raw["nam"]) if "nam" in raw else NamConfig(),
        sdm=SdmConfig(**raw["sdm"]) if "sdm" in raw else SdmConfig(tau=0.3),
    )
    # Flags override file values.
    overrides = {}
    if args.mask_mode is not None:
        overrides["mask_mode"] = args.mask_mode
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch is not None:
        overrides["batch_size"] = args.batch
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mlm:
        overrides["mlm_enabled"] = True
    if args.mask_ratio is not None or args.tap_layer is not None:
        overrides["nam"] = replace(
            cfg.nam,
            **{
                k: v
                for k, v in (("p", args.mask_ratio), ("tap_layer", args.tap_layer))
                if v is not None
            },
        )
    if args.tau is not None:
        overrides["sdm"] = replace(cfg.sdm, tau=args.tau)
    return replace(cfg, **overrides) if overrides else cfg


def _cmd_gen_corpus(args) -> int:
    from .corpus import make_attribute_spec

    dataset = gen_corpus(
        args.out,
        spec=make_attribute_spec(patch_dim=args.patch_dim, seed=args.seed),
        n_identities=args.identities,
        images_per_identity=args.images_per_identity,
        captions_per_image=args.captions_per_image,
        noise_rate=args.noise_rate,
        seed=args.seed,
        m_patches=args.patches,
        test_fraction=args.test_fraction,
    )
    print(
        f"wrote {args.out}: {len(dataset.images)} images, {len(dataset.captions)} captions, "
        f"{len(dataset.split.train_identities)}/{len(dataset.split.test_identities)} train/test identities"
    )
    return 0


def _cmd_build_captions(args) -> int:
    import numpy as np

    dataset = load_dataset(args.data)
    bank = load_template_bank(args.bank)
    records = []
    if args.mock:
        rng = np.random.default_rng(args.seed)
        for img in dataset.images:
            for c in range(2):
                dynamic = c == 1
                records.append(
                    mock_caption(
                        img.attributes,
                        dataset.spec.pools(),
                        args.noise_rate,
                        rng,
                        bank=bank if dynamic else None,
                        template_index=int(rng.integers(len(bank))) if dynamic else None,
                        image_id=img.image_id,
                        caption_id=f"{img.image_id}.re{c}",
                        captioner_id="mock0",
                    )
                )
    else:
        rng = __import__("numpy").random.default_rng(args.seed)
        endpoint = CaptionerEndpoint(base_url=args.endpoint, timeout=args.timeout, retry_budget=args.retries)
        for img in dataset.images:
            dynamic = bool(rng.integers(2))
            if dynamic:
                template = bank.templates[int(rng.integers(len(bank)))]
                instruction = dynamic_instruction(template)
                source = "dynamic:remote"
            else:
                instruction = static_instruction()
                source = "static:remote"
            rec = caption_image(endpoint, img.image_id, instruction, source=source, caption_id=f"{img.image_id}.re0")
            if dynamic:
                rec = replace(rec, template_index=bank.templates.index(template))
            records.append(rec)
    save_captions(args.out, records)
    print(f"wrote {args.out}: {len(records)} captions")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    config = _train_config(args)
    state = train(dataset, config, resume_from=args.resume, checkpoint_dir=args.out)
    save_trace(Path(args.out) / "trace.csv", state.loss_trace)
    last = state.loss_trace[-1] if state.loss_trace else None
    print(
        f"trained {state.epoch} epochs ({state.global_step} steps); "
        f"final loss {last.loss_sdm:.4f}" if last else "trained 0 epochs"
    )
    print(f"checkpoints in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    state = checkpoint_load(args.ckpt)
    result = evaluate(state, dataset, split=args.split)
    print(
        f"rank1 {result.rank1:.4f}  rank5 {result.rank5:.4f}  "
        f"rank10 {result.rank10:.4f}  mAP {result.mean_ap:.4f}"
    )
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("rank1,rank5,rank10,map\n")
            fh.write(f"{result.rank1!r},{result.rank5!r},{result.rank10!r},{result.mean_ap!r}\n")
        print(f"wrote {args.out}")
    return 0


_SWEEP_DEFAULTS = {
    "mask_mode": ("nam", "em", "none"),
    "ratio": ("0.05", "0.15", "0.3"),
    "mlm": ("0", "1"),
}


def _cmd_ablate(args) -> int:
    dataset = load_dataset(args.data)
    base = TrainConfig(
        epochs=args.epochs if args.epochs is not None else TrainConfig.epochs,
        batch_size=args.batch if args.batch is not None else TrainConfig.batch_size,
        learning_rate=args.lr if args.lr is not None else TrainConfig.learning_rate,
    )
    if args.values:
        values = args.values.split(",")
    elif args.sweep == "layer":
        values = [str(l) for l in range(1, base.encoder.depth + 1)]
    else:
        values = list(_SWEEP_DEFAULTS[args.sweep])
    if args.sweep == "mlm":
        values = [v in ("1", "true", "True") for v in values]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablate(dataset, base, args.sweep, values, seeds=seeds, out_csv=args.out, with_auc=not args.no_auc)
    print(f"wrote {args.out}: {len(rows)} runs")
    return 0


def _cmd_inspect_noise(args) -> int:
    dataset = load_dataset(args.data)
    state = checkpoint_load(args.ckpt)
    matches = [c for c in dataset.captions if c.caption_id == args.caption_id]
    if not matches:
        raise ContractViolation(f"caption {args.caption_id!r} not found in {args.data}")
    cap = matches[0]
    scored = caption_noise_scores(state, dataset, cap)
    probs = state.noise_table.fetch(cap.caption_id, len(scored), state.epoch + 1, state.train_config.nam.p)
    labels = cap.noise_labels or (None,) * len(scored)
    print(f"{'word':<14} {'r':>8} {'r_next':>8}  noise_label")
    for (word, level), prob, label in zip(scored, probs, labels):
        print(f"{word:<14} {level:>8.4f} {prob:>8.4f}  {'-' if label is None else str(bool(label)).lower()}")
    return 0


_COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "build-captions": _cmd_build_captions,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "inspect-noise": _cmd_inspect_noise,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors; usage errors are
        # caller contract violations here.
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except (ContractViolation, NumericInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TransportError, ProtocolError, CorruptionError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
