"""Similarity-distribution-matching loss over batch globals, plus the
masked-word prediction head used only as an ablation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .errors import ContractViolation, NumericInputError
from .numerics import ComputationRecord, Tensor


@dataclass(frozen=True)
class SdmConfig:
    tau: float = 0.02  # softmax temperature over batch similarities
    epsilon: float = 1e-8  # stabilizer inside the target log

    def __post_init__(self):
        if not self.tau > 0.0:
            raise ContractViolation("tau must be positive")
        if not self.epsilon > 0.0:
            raise ContractViolation("epsilon must be positive")


@dataclass(frozen=True)
class BatchLabels:
    """One identity per batch item; equal identities are positives."""

    ids: tuple

    def __post_init__(self):
        if len(self.ids) == 0:
            raise ContractViolation("batch labels must be non-empty")

    def __len__(self) -> int:
        return len(self.ids)

    def match_matrix(self) -> np.ndarray:
        arr = np.asarray([[1.0 if a == b else 0.0 for b in self.ids] for a in self.ids])
        return arr


def build_q(labels: BatchLabels) -> np.ndarray:
    """Ground-truth matching distribution: matches share each row's unit mass."""
    y = labels.match_matrix()
    return y / y.sum(axis=1, keepdims=True)


def _kl_to_target(p: Tensor, log_q_eps: Tensor, batch: int, record) -> Tensor:
    log_p = nm.log(p, record)
    diff = nm.add(log_p, nm.scale(log_q_eps, -1.0, record), record)
    return nm.scale(nm.reduce_sum(nm.mul(p, diff, record), record=record), 1.0 / batch, record)


def sdm_loss(
    v_cls: Tensor,
    t_eos: Tensor,
    labels: BatchLabels,
    config: SdmConfig = SdmConfig(),
    record: ComputationRecord | None = None,
) -> Tensor:
    """Both KL directions between softmaxed cosine similarities and the
    identity-match distribution. Differentiable through both embeddings."""
    if v_cls.data.ndim != 2 or t_eos.data.ndim != 2:
        raise ContractViolation("embeddings must be 2-D (batch, width)")
    if v_cls.data.shape != t_eos.data.shape:
        raise ContractViolation(
            f"embedding blocks differ: {v_cls.data.shape} vs {t_eos.data.shape}"
        )
    batch = v_cls.data.shape[0]
    if len(labels) != batch:
        raise ContractViolation(f"{len(labels)} labels for batch of {batch}")
    for name, t in (("image", v_cls), ("text", t_eos)):
        if np.any((t.data * t.data).sum(axis=1) == 0.0):
            raise NumericInputError(f"zero-norm {name} embedding in batch")
    q = build_q(labels)
    log_q = Tensor(np.log(q + config.epsilon), _validate=False)

    vn = nm.l2_normalize(v_cls, record)
    tn = nm.l2_normalize(t_eos, record)
    sims = nm.matmul(vn, nm.transpose(tn, record), record)
    p_i2t = nm.row_softmax(sims, temperature=config.tau, record=record)
    p_t2i = nm.row_softmax(nm.transpose(sims, record), temperature=config.tau, record=record)
    loss_i2t = _kl_to_target(p_i2t, log_q, batch, record)
    # The match matrix is symmetric, so the text-to-image target reuses q.
    loss_t2i = _kl_to_target(p_t2i, log_q, batch, record)
    return nm.add(loss_i2t, loss_t2i, record)


@dataclass(frozen=True)
class MlmResult:
    loss: Tensor
    positions: int
    empty_warning: bool


def mlm_loss(
    features: Tensor,
    image_globals: Tensor,
    targets: Sequence[int],
    head_w: Tensor,
    head_b: Tensor,
    record: ComputationRecord | None = None,
) -> MlmResult:
    """Mean cross-entropy of a linear vocabulary head over masked positions.

    ``features`` are last-block text embeddings at the masked positions;
    each row is conditioned by adding the paired image's global embedding.
    Zero masked positions is a defined edge case: zero loss, flagged.
    """
    k = features.data.shape[0]
    if k == 0:
        return MlmResult(loss=Tensor(np.zeros((1, 1)), _validate=False), positions=0, empty_warning=True)
    if image_globals.data.shape != features.data.shape:
        raise ContractViolation("image_globals must align row-for-row with features")
    if len(targets) != k:
        raise ContractViolation(f"{len(targets)} targets for {k} masked positions")
    vocab_size = head_w.data.shape[1]
    for t in targets:
        if not 0 <= int(t) < vocab_size:
            raise ContractViolation(f"target id {t} outside vocabulary of {vocab_size}")
    conditioned = nm.add(features, image_globals, record)
    logits = nm.add(nm.matmul(conditioned, head_w, record), head_b, record)
    probs = nm.row_softmax(logits, record=record)
    one_hot = np.zeros((k, vocab_size))
    one_hot[np.arange(k), np.asarray(targets, dtype=np.intp)] = 1.0
    picked = nm.mul(nm.log(probs, record), Tensor(one_hot, _validate=False), record)
    loss = nm.scale(nm.reduce_sum(picked, record=record), -1.0 / k, record)
    return MlmResult(loss=loss, positions=k, empty_warning=False)
