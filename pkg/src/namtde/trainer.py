"""Training loop: one gradient-tracked text pass per caption, plus (in nam
mode only) one untracked pass over the original caption whose tap embeddings
set the next epoch's masking probabilities.

All per-epoch randomness (identity order, image/caption choice, mask draws)
comes from a generator derived from (seed, epoch), so resuming from an
epoch-boundary checkpoint replays the remaining epochs bit-identically.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .corpus import Dataset
from .encoders import (
    EncoderConfig,
    encode_image_batch,
    encode_text_batch,
    init_params,
    text_tap_batch,
)
from .errors import ContractViolation, CorruptionError, FormatError
from .losses import BatchLabels, MlmResult, SdmConfig, mlm_loss, sdm_loss
from .nam import NamConfig, NoiseTable, noise_levels, recenter, token_similarity
from .numerics import ComputationRecord, Tensor
from .tde import CaptionRecord
from .tokenizer import Vocabulary, apply_mask, build_vocab, load_vocab, masked_positions, save_vocab, tokenize

CHECKPOINT_VERSION = 1

MASK_MODES = ("nam", "em", "none")


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; ``paper_profile`` documents the full-scale ones.

    Random-init towers this small need a softer similarity temperature, a
    hotter learning rate, and more epochs than the full-scale recipe, or
    contrastive training never leaves the uniform-softmax plateau.
    """

    epochs: int = 240
    batch_size: int = 32
    learning_rate: float = 1e-3
    mask_mode: str = "nam"
    mlm_enabled: bool = False
    seed: int = 0
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    nam: NamConfig = field(default_factory=NamConfig)
    sdm: SdmConfig = field(default_factory=lambda: SdmConfig(tau=0.3))

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.epochs < 0:
            raise ContractViolation("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ContractViolation("learning rate must be positive")
        if self.mask_mode not in MASK_MODES:
            raise ContractViolation(f"mask_mode must be one of {MASK_MODES}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ContractViolation("weight_decay and grad_clip must be >= 0")


def paper_profile() -> TrainConfig:
    """The full-scale recipe (pretrained towers, millions of pairs): Adam at
    1e-5 with cosine decay, 30 epochs, 64 pairs per device, temperature 0.02.
    Documented for reference; random-init desk runs want the defaults above."""
    return TrainConfig(epochs=30, batch_size=64, learning_rate=1e-5, sdm=SdmConfig(tau=0.02))


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(frozen=True)
class TraceRow:
    step: int
    epoch: int
    lr: float
    loss_sdm: float
    loss_mlm: float
    mask_rate: float


@dataclass(frozen=True)
class StepCounters:
    epoch: int
    step: int
    captions: int
    tracked_text_forwards: int
    untracked_text_forwards: int
    mask_draws: int
    masked_tokens: int
    epoch_one_constant_p: bool  # every fetched probability equalled p exactly


@dataclass
class TrainState:
    params: dict[str, Tensor]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    epoch: int
    global_step: int
    total_steps: int
    noise_table: NoiseTable
    vocab: Vocabulary
    encoder_config: EncoderConfig
    train_config: TrainConfig
    loss_trace: list[TraceRow] = field(default_factory=list)
    step_counters: list[StepCounters] = field(default_factory=list)


def resolve_encoder_config(dataset: Dataset, config: TrainConfig) -> tuple[EncoderConfig, Vocabulary]:
    vocab = build_vocab((c.text for c in dataset.captions), min_freq=1)
    tap = config.nam.tap_layer if config.nam.tap_layer is not None else config.encoder.tap_layer
    enc = replace(
        config.encoder,
        vocab_size=vocab.size,
        patch_dim=dataset.patch_dim,
        image_tokens=dataset.m_patches,
        tap_layer=tap,
    )
    return enc, vocab


def fresh_state(dataset: Dataset, config: TrainConfig, audit_table: bool = True) -> TrainState:
    enc, vocab = resolve_encoder_config(dataset, config)
    train_ids = dataset.split.train_identities
    steps_per_epoch = len(train_ids) // config.batch_size
    return TrainState(
        params=init_params(enc, config.seed),
        adam_m={},
        adam_v={},
        adam_t=0,
        epoch=0,
        global_step=0,
        total_steps=config.epochs * steps_per_epoch,
        noise_table=NoiseTable(audit=audit_table),
        vocab=vocab,
        encoder_config=enc,
        train_config=config,
    )


@dataclass(frozen=True)
class _Item:
    identity: str
    patches: np.ndarray
    caption: CaptionRecord
    sequence: "object"


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xE10C, epoch]))


def _epoch_batches(dataset: Dataset, config: TrainConfig, epoch: int, tokens: dict, rng) -> list[list[_Item]]:
    train_ids = list(dataset.split.train_identities)
    if len(train_ids) < config.batch_size:
        raise ContractViolation(
            f"{len(train_ids)} train identities cannot fill a batch of {config.batch_size}"
        )
    by_identity = dataset.images_by_identity()
    by_image = dataset.captions_by_image()
    order = [train_ids[i] for i in rng.permutation(len(train_ids))]
    batches = []
    n_full = len(order) // config.batch_size
    for b in range(n_full):  # last partial batch dropped
        chunk = order[b * config.batch_size : (b + 1) * config.batch_size]
        batch = []
        for identity in chunk:
            images = by_identity[identity]
            img = images[int(rng.integers(len(images)))]
            caps = by_image[img.image_id]
            cap = caps[int(rng.integers(len(caps)))]
            batch.append(_Item(identity=identity, patches=img.patches, caption=cap, sequence=tokens[cap.caption_id]))
        batches.append(batch)
    return batches


def _adam_update(state: TrainState, lr_t: float) -> None:
    cfg = state.train_config
    state.adam_t += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    if cfg.grad_clip > 0.0:
        sq = 0.0
        for p in state.params.values():
            if p.grad is not None:
                sq += float((p.grad * p.grad).sum())
        norm = math.sqrt(sq)
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            for p in state.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale
    c1 = 1.0 - b1**state.adam_t
    c2 = 1.0 - b2**state.adam_t
    for name, p in state.params.items():
        if p.grad is None:
            continue
        g = p.grad
        if cfg.weight_decay > 0.0:
            g = g + cfg.weight_decay * p.data
        m = state.adam_m.get(name)
        v = state.adam_v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.adam_m[name] = m
        state.adam_v[name] = v
        p.data = p.data - lr_t * (m / c1) / (np.sqrt(v / c2) + eps)
    for p in state.params.values():
        p.grad = None


def train_step(batch: Sequence[_Item], state: TrainState, epoch: int, rng) -> TraceRow:
    """One iteration: image forward, masking, text forwards, loss, update."""
    cfg = state.train_config
    enc = state.encoder_config
    record = ComputationRecord()
    p_ratio = cfg.nam.p

    image_enc = encode_image_batch(
        [item.patches for item in batch], state.params, enc, record,
        want_taps=cfg.mask_mode == "nam",
    )
    v_cls = image_enc.global_embeddings

    draws = 0
    masked_count = 0
    epoch_one_constant = True
    masked_seqs = []
    hits_per_item: list[tuple[int, ...]] = []

    for item in batch:
        seq = item.sequence
        wc = seq.word_count
        if cfg.mask_mode == "nam":
            probs = state.noise_table.fetch(item.caption.caption_id, wc, epoch, p_ratio)
        elif cfg.mask_mode == "em":
            probs = [p_ratio] * wc
        else:
            probs = None
        if epoch == 1 and probs is not None and any(x != p_ratio for x in probs):
            epoch_one_constant = False
        if probs is None:
            masked_seqs.append(seq)
            hits_per_item.append(())
        else:
            masked_seq = apply_mask(seq, probs, rng)
            hit = masked_positions(seq, masked_seq)
            draws += wc
            masked_count += len(hit)
            masked_seqs.append(masked_seq)
            hits_per_item.append(hit)

    # One gradient-tracked text pass covering every caption in the batch.
    text_enc = encode_text_batch(masked_seqs, state.params, enc, record)
    tracked = len(batch)
    t_eos = text_enc.global_embeddings

    untracked = 0
    if cfg.mask_mode == "nam":
        # Untracked tap pass over the original captions; it only feeds the
        # table for the next epoch, never the loss.
        nam_items = [(b, item) for b, item in enumerate(batch) if item.sequence.word_count > 0]
        taps = text_tap_batch([item.sequence for _, item in nam_items], state.params, enc)
        untracked = len(nam_items)
        for (b, item), tap in zip(nam_items, taps):
            sim = token_similarity(tap.data, image_enc.taps[b], tap.zero_rows)
            result = recenter(noise_levels(sim), p_ratio, cfg.nam.clamp)
            state.noise_table.update(item.caption.caption_id, result.probs, epoch)

    labels = BatchLabels(tuple(item.identity for item in batch))
    loss = sdm_loss(v_cls, t_eos, labels, cfg.sdm, record)
    loss_sdm_value = loss.item()
    loss_mlm_value = 0.0
    if cfg.mlm_enabled:
        feature_idx: list[int] = []
        mlm_image_rows: list[int] = []
        mlm_targets: list[int] = []
        for b, (item, hit) in enumerate(zip(batch, hits_per_item)):
            offset = text_enc.offsets[b]
            feature_idx.extend(offset + pos for pos in hit)
            mlm_image_rows.extend([b] * len(hit))
            mlm_targets.extend(item.sequence.ids[pos] for pos in hit)
        if feature_idx:
            features = nm.take_rows(text_enc.last_hidden, feature_idx, record)
            image_rows = nm.take_rows(v_cls, mlm_image_rows, record)
            mlm = mlm_loss(features, image_rows, mlm_targets, state.params["mlm.w"], state.params["mlm.b"], record)
            loss_mlm_value = mlm.loss.item()
            loss = nm.add(loss, mlm.loss, record)

    nm.backward(record, loss)
    lr_t = cosine_lr(cfg.learning_rate, state.global_step, state.total_steps)
    _adam_update(state, lr_t)

    row = TraceRow(
        step=state.global_step,
        epoch=epoch,
        lr=lr_t,
        loss_sdm=loss_sdm_value,
        loss_mlm=loss_mlm_value,
        mask_rate=(masked_count / draws) if draws else 0.0,
    )
    state.loss_trace.append(row)
    state.step_counters.append(
        StepCounters(
            epoch=epoch,
            step=state.global_step,
            captions=len(batch),
            tracked_text_forwards=tracked,
            untracked_text_forwards=untracked,
            mask_draws=draws,
            masked_tokens=masked_count,
            epoch_one_constant_p=epoch_one_constant,
        )
    )
    state.global_step += 1
    return row


def train(
    dataset: Dataset,
    config: TrainConfig,
    *,
    resume_from=None,
    checkpoint_dir=None,
    epoch_hook: Callable | None = None,
    audit_table: bool = True,
) -> TrainState:
    """Run (or resume) training to ``config.epochs``; checkpoints per epoch."""
    if resume_from is not None:
        state = checkpoint_load(resume_from, expected_config=config)
    else:
        state = fresh_state(dataset, config, audit_table=audit_table)
    tokens = {
        cap.caption_id: tokenize(cap.text, state.vocab, caption_id=cap.caption_id)
        for cap in dataset.captions
    }
    for epoch in range(state.epoch + 1, config.epochs + 1):
        rng = _epoch_rng(config.seed, epoch)
        for batch in _epoch_batches(dataset, config, epoch, tokens, rng):
            train_step(batch, state, epoch, rng)
        state.epoch = epoch
        if checkpoint_dir is not None:
            checkpoint_save(Path(checkpoint_dir) / f"epoch_{epoch:03d}", state)
        if epoch_hook is not None:
            epoch_hook(state, epoch)
    return state


# --- persistence -------------------------------------------------------------


def _config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def _config_from_dict(raw: dict) -> TrainConfig:
    enc = EncoderConfig(**raw["encoder"])
    nam_raw = dict(raw["nam"])
    nam_raw["clamp"] = tuple(nam_raw["clamp"])
    nam_cfg = NamConfig(**nam_raw)
    sdm_cfg = SdmConfig(**raw["sdm"])
    rest = {k: v for k, v in raw.items() if k not in ("encoder", "nam", "sdm")}
    return TrainConfig(encoder=enc, nam=nam_cfg, sdm=sdm_cfg, **rest)


def save_trace(path, rows: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "lr", "loss_sdm", "loss_mlm", "mask_rate"])
        for row in rows:
            writer.writerow(
                [row.step, row.epoch, repr(row.lr), repr(row.loss_sdm), repr(row.loss_mlm), repr(row.mask_rate)]
            )


def load_trace(path) -> list[TraceRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            rows.append(
                TraceRow(
                    step=int(raw["step"]),
                    epoch=int(raw["epoch"]),
                    lr=float(raw["lr"]),
                    loss_sdm=float(raw["loss_sdm"]),
                    loss_mlm=float(raw["loss_mlm"]),
                    mask_rate=float(raw["mask_rate"]),
                )
            )
    return rows


def checkpoint_save(path, state: TrainState) -> None:
    root = Path(path)
    for sub in ("params", "adam_m", "adam_v"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    for name, tensor in state.params.items():
        rel = f"params/{name}.bin"
        nm.write_blob(root / rel, tensor.data)
        files[rel] = nm.file_sha256(root / rel)
    for sub, table in (("adam_m", state.adam_m), ("adam_v", state.adam_v)):
        for name, arr in table.items():
            rel = f"{sub}/{name}.bin"
            nm.write_blob(root / rel, arr)
            files[rel] = nm.file_sha256(root / rel)
    save_vocab(root / "vocab.txt", state.vocab)
    files["vocab.txt"] = nm.file_sha256(root / "vocab.txt")
    state.noise_table.save(root / "noise_table.jsonl")
    files["noise_table.jsonl"] = nm.file_sha256(root / "noise_table.jsonl")
    save_trace(root / "trace.csv", state.loss_trace)
    files["trace.csv"] = nm.file_sha256(root / "trace.csv")
    manifest = {
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "adam_t": state.adam_t,
        "total_steps": state.total_steps,
        "rng": {"scheme": "per-epoch-derived", "seed": state.train_config.seed, "next_epoch": state.epoch + 1},
        "train_config": _config_to_dict(state.train_config),
        "encoder_config": asdict(state.encoder_config),
        "checksums": files,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def checkpoint_load(path, expected_config: TrainConfig | None = None, audit_table: bool = True) -> TrainState:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{root}: checkpoint version {manifest.get('version')} unsupported")
    for rel, expected in manifest["checksums"].items():
        if nm.file_sha256(root / rel) != expected:
            raise CorruptionError(f"{root}/{rel}: checksum mismatch")
    config = _config_from_dict(manifest["train_config"])
    encoder_config = EncoderConfig(**manifest["encoder_config"])
    if expected_config is not None:
        # JSON turns tuples into lists; compare both sides post round-trip.
        expected_raw = json.loads(json.dumps(_config_to_dict(expected_config)))
        if expected_raw != manifest["train_config"]:
            raise FormatError(f"{root}: checkpoint was written with a different configuration")
    params: dict[str, Tensor] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for rel in manifest["checksums"]:
        if rel.startswith("params/"):
            params[rel[len("params/") : -len(".bin")]] = Tensor(nm.read_blob(root / rel), _validate=False)
        elif rel.startswith("adam_m/"):
            adam_m[rel[len("adam_m/") : -len(".bin")]] = nm.read_blob(root / rel)
        elif rel.startswith("adam_v/"):
            adam_v[rel[len("adam_v/") : -len(".bin")]] = nm.read_blob(root / rel)
    return TrainState(
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        adam_t=int(manifest["adam_t"]),
        epoch=int(manifest["epoch"]),
        global_step=int(manifest["global_step"]),
        total_steps=int(manifest["total_steps"]),
        noise_table=NoiseTable.load(root / "noise_table.jsonl", audit=audit_table),
        vocab=load_vocab(root / "vocab.txt"),
        encoder_config=encoder_config,
        train_config=config,
        loss_trace=load_trace(root / "trace.csv"),
    )


def states_equal(a: TrainState, b: TrainState) -> bool:
    if sorted(a.params) != sorted(b.params):
        return False
    for name in a.params:
        if not np.array_equal(a.params[name].data, b.params[name].data):
            return False
    for table_a, table_b in ((a.adam_m, b.adam_m), (a.adam_v, b.adam_v)):
        if sorted(table_a) != sorted(table_b):
            return False
        for name in table_a:
            if not np.array_equal(table_a[name], table_b[name]):
                return False
    return (
        a.adam_t == b.adam_t
        and a.epoch == b.epoch
        and a.global_step == b.global_step
        and a.noise_table.entries() == b.noise_table.entries()
        and a.vocab.word_ids == b.vocab.word_ids
        and a.loss_trace == b.loss_trace
    )
