"""Retrieval metrics, the noise-detection oracle report, and ablation sweeps.

Ranking ties break deterministically toward the lower gallery index.
Evaluation is pure given (state, dataset) and parallelizes trivially over
queries; ablation runs execute sequentially.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Dataset
from .encoders import (
    encode_image_batch,
    encode_text_batch,
    image_tap,
    image_tap_batch,
    text_tap,
    text_tap_batch,
)
from .errors import ContractViolation
from .nam import noise_levels, token_similarity
from .tokenizer import split_words, tokenize
from .trainer import TrainConfig, TrainState, fresh_state, train


@dataclass(frozen=True)
class RetrievalResult:
    rank1: float
    rank5: float
    rank10: float
    mean_ap: float
    per_query_ranks: tuple[int, ...]

    def __post_init__(self):
        for v in (self.rank1, self.rank5, self.rank10, self.mean_ap):
            if not 0.0 <= v <= 1.0:
                raise ContractViolation("retrieval fractions must lie in [0, 1]")
        if not self.rank1 <= self.rank5 <= self.rank10:
            raise ContractViolation("rank-k accuracies must be monotone in k")


def _ranking(sim_row: np.ndarray) -> np.ndarray:
    # Descending similarity; stable sort breaks ties by lower gallery index.
    return np.argsort(-sim_row, kind="stable")


def _validate_ranking_inputs(sim, query_ids, gallery_ids):
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise ContractViolation("similarity matrix must be 2-D")
    if sim.shape != (len(query_ids), len(gallery_ids)):
        raise ContractViolation(
            f"similarity {sim.shape} does not match {len(query_ids)} queries x {len(gallery_ids)} gallery items"
        )
    gallery = np.asarray(gallery_ids)
    for qi, qid in enumerate(query_ids):
        if not np.any(gallery == qid):
            raise ContractViolation(f"query {qi} has no matching gallery item")
    return sim, gallery


def rank_k(sim, query_ids, gallery_ids, k: int) -> float:
    """Fraction of queries with a matching gallery id in the top k."""
    if k < 1:
        raise ContractViolation("k must be >= 1")
    sim, gallery = _validate_ranking_inputs(sim, query_ids, gallery_ids)
    hits = 0
    for qi, qid in enumerate(query_ids):
        order = _ranking(sim[qi])[:k]
        if np.any(gallery[order] == qid):
            hits += 1
    return hits / len(query_ids)


def mean_ap(sim, query_ids, gallery_ids) -> float:
    """Mean over queries of average precision (precision at each relevant rank)."""
    sim, gallery = _validate_ranking_inputs(sim, query_ids, gallery_ids)
    ap_values = []
    for qi, qid in enumerate(query_ids):
        order = _ranking(sim[qi])
        relevant = gallery[order] == qid
        ranks = np.flatnonzero(relevant) + 1
        precisions = (np.arange(len(ranks)) + 1) / ranks
        ap_values.append(precisions.mean())
    return float(np.mean(ap_values))


def first_hit_ranks(sim, query_ids, gallery_ids) -> tuple[int, ...]:
    sim, gallery = _validate_ranking_inputs(sim, query_ids, gallery_ids)
    out = []
    for qi, qid in enumerate(query_ids):
        order = _ranking(sim[qi])
        out.append(int(np.flatnonzero(gallery[order] == qid)[0]) + 1)
    return tuple(out)


_EVAL_CHUNK = 64


def _chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _encode_gallery(state: TrainState, images) -> np.ndarray:
    rows = []
    for chunk in _chunks(images, _EVAL_CHUNK):
        enc = encode_image_batch(
            [img.patches for img in chunk], state.params, state.encoder_config, want_taps=False
        )
        rows.append(enc.global_embeddings.data)
    block = np.vstack(rows)
    return block / np.linalg.norm(block, axis=1, keepdims=True)


def evaluate(state: TrainState, dataset: Dataset, split: str = "test") -> RetrievalResult:
    """Text queries against the image gallery of the chosen identity split."""
    if split == "test":
        identities = set(dataset.split.test_identities)
    elif split == "train":
        identities = set(dataset.split.train_identities)
    else:
        raise ContractViolation(f"unknown split {split!r}")
    images = [img for img in dataset.images if img.identity_id in identities]
    if not images:
        raise ContractViolation(f"split {split!r} holds no images")
    by_image = dataset.captions_by_image()
    gallery = _encode_gallery(state, images)
    gallery_ids = [img.identity_id for img in images]

    query_seqs = []
    query_ids = []
    for img in images:
        for cap in by_image.get(img.image_id, ()):
            query_seqs.append(tokenize(cap.text, state.vocab, caption_id=cap.caption_id))
            query_ids.append(img.identity_id)
    query_rows = []
    for chunk in _chunks(query_seqs, _EVAL_CHUNK):
        enc = encode_text_batch(chunk, state.params, state.encoder_config)
        query_rows.append(enc.global_embeddings.data)
    queries = np.vstack(query_rows)
    queries = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    sim = queries @ gallery.T
    return RetrievalResult(
        rank1=rank_k(sim, query_ids, gallery_ids, 1),
        rank5=rank_k(sim, query_ids, gallery_ids, 5),
        rank10=rank_k(sim, query_ids, gallery_ids, 10),
        mean_ap=mean_ap(sim, query_ids, gallery_ids),
        per_query_ranks=first_hit_ranks(sim, query_ids, gallery_ids),
    )


def roc_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Rank-based AUC with midrank tie handling."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("AUC needs both positive and negative examples")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s))
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class NoiseDetectionReport:
    mean_noise_level_noisy: float
    mean_noise_level_clean: float
    auc: float
    tokens_scored: int

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ContractViolation("AUC must lie in [0, 1]")


def caption_noise_scores(state: TrainState, dataset: Dataset, caption) -> list[tuple[str, float]]:
    """Per-word noise level of one caption under the current parameters."""
    img = dataset.image_index()[caption.image_id]
    img_tap = image_tap(img.patches, state.params, state.encoder_config)
    seq = tokenize(caption.text, state.vocab, caption_id=caption.caption_id)
    tap = text_tap(seq, state.params, state.encoder_config)
    sim = token_similarity(tap.data, img_tap.data, tap.zero_rows)
    words = split_words(caption.text)[: seq.word_count]
    return list(zip(words, noise_levels(sim).tolist()))


def noise_detection(state: TrainState, dataset: Dataset) -> NoiseDetectionReport:
    """Recompute per-token noise levels corpus-wide and score them against the
    ground-truth labels carried by the synthetic captions."""
    scores: list[float] = []
    labels: list[bool] = []
    index = dataset.image_index()
    for cap in dataset.captions:
        if cap.noise_labels is None:
            raise ContractViolation(f"caption {cap.caption_id!r} has no noise labels")
    images = dataset.images
    image_tap_cache: dict[str, tuple[np.ndarray, tuple[int, ...]]] = {}
    for chunk in _chunks(images, _EVAL_CHUNK):
        taps = image_tap_batch([img.patches for img in chunk], state.params, state.encoder_config)
        for img, tap in zip(chunk, taps):
            image_tap_cache[img.image_id] = (tap.data, tap.zero_rows)
    captions = dataset.captions
    seqs = [tokenize(c.text, state.vocab, caption_id=c.caption_id) for c in captions]
    for chunk_start in range(0, len(captions), _EVAL_CHUNK):
        chunk = captions[chunk_start : chunk_start + _EVAL_CHUNK]
        chunk_seqs = seqs[chunk_start : chunk_start + _EVAL_CHUNK]
        taps = text_tap_batch(chunk_seqs, state.params, state.encoder_config)
        for cap, seq, tap in zip(chunk, chunk_seqs, taps):
            cached = image_tap_cache[cap.image_id]
            sim = token_similarity(tap.data, cached[0], tap.zero_rows)
            r = noise_levels(sim)
            for level, lab in zip(r, cap.noise_labels[: seq.word_count]):
                scores.append(float(level))
                labels.append(bool(lab))
    return NoiseDetectionReport(
        mean_noise_level_noisy=float(np.mean([s for s, l in zip(scores, labels) if l])),
        mean_noise_level_clean=float(np.mean([s for s, l in zip(scores, labels) if not l])),
        auc=roc_auc(scores, labels),
        tokens_scored=len(scores),
    )


@dataclass(frozen=True)
class AblationRow:
    sweep_value: str
    seed: int
    rank1: float
    rank5: float
    rank10: float
    mean_ap: float
    auc: float


SWEEPS = ("mask_mode", "layer", "ratio", "mlm")


def _configure(base: TrainConfig, sweep: str, value) -> TrainConfig:
    if sweep == "mask_mode":
        if value not in ("nam", "em", "none"):
            raise ContractViolation(f"bad mask_mode {value!r}")
        return replace(base, mask_mode=value)
    if sweep == "layer":
        return replace(base, nam=replace(base.nam, tap_layer=int(value)))
    if sweep == "ratio":
        return replace(base, nam=replace(base.nam, p=float(value)))
    if sweep == "mlm":
        return replace(base, mlm_enabled=bool(value))
    raise ContractViolation(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")


def ablate(
    dataset: Dataset,
    base_config: TrainConfig,
    sweep: str,
    values: Sequence,
    seeds: Sequence[int] = (0,),
    out_csv=None,
    with_auc: bool = True,
) -> list[AblationRow]:
    """Train one run per (value, seed) and collect held-out retrieval metrics."""
    rows = []
    for value in values:
        for seed in seeds:
            config = replace(_configure(base_config, sweep, value), seed=int(seed))
            state = train(dataset, config, audit_table=False)
            result = evaluate(state, dataset, split="test")
            auc = noise_detection(state, dataset).auc if with_auc else float("nan")
            rows.append(
                AblationRow(
                    sweep_value=str(value),
                    seed=int(seed),
                    rank1=result.rank1,
                    rank5=result.rank5,
                    rank10=result.rank10,
                    mean_ap=result.mean_ap,
                    auc=auc,
                )
            )
    if out_csv is not None:
        save_ablation_csv(out_csv, rows)
    return rows


def save_ablation_csv(path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sweep_value", "seed", "rank1", "rank5", "rank10", "map", "auc"])
        for row in rows:
            writer.writerow(
                [row.sweep_value, row.seed, repr(row.rank1), repr(row.rank5), repr(row.rank10), repr(row.mean_ap), repr(row.auc)]
            )


def untrained_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    """A freshly initialized model, for chance-level baselines."""
    return fresh_state(dataset, config, audit_table=False)
