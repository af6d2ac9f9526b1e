"""Noise-aware masking: score each caption token against the paired image's
patch tokens and turn the mismatch into next-epoch masking probabilities.

The per-token noise level is one minus the best cosine similarity between
the token's tap embedding and any patch embedding. Levels are recentered so
their mean equals the configured overall ratio, clamped into [0, 1], and
stored per caption; a value written during epoch e only becomes readable at
epoch e + 1, so each training iteration pays exactly one extra text forward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation, FormatError

_SIM_TOL = 1e-9


@dataclass(frozen=True)
class NamConfig:
    p: float = 0.15  # average masking ratio
    tap_layer: int | None = None  # None: use the encoder's configured tap
    clamp: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ContractViolation("average masking ratio must lie in [0, 1]")
        lo, hi = self.clamp
        if not (0.0 <= lo < hi <= 1.0):
            raise ContractViolation("clamp bounds must satisfy 0 <= lo < hi <= 1")


@dataclass(frozen=True)
class SimilarityMatrix:
    """Token-by-patch cosine similarities, entries in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ContractViolation(f"similarity matrix must be 2-D, got {v.shape}")
        if v.size and (v.min() < -1.0 - _SIM_TOL or v.max() > 1.0 + _SIM_TOL):
            raise ContractViolation("similarity entries outside [-1, 1]")
        object.__setattr__(self, "values", np.clip(v, -1.0, 1.0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def token_similarity(f_t, f_v, text_zero_rows: Sequence[int] = ()) -> SimilarityMatrix:
    """Entrywise cosine similarities between text rows and image rows.

    Both inputs must already be row-normalized (or carry the zero-row flag);
    flagged zero text rows get a similarity of 0 against every patch.
    """
    ft = np.asarray(f_t, dtype=np.float64)
    fv = np.asarray(f_v, dtype=np.float64)
    if ft.ndim != 2 or fv.ndim != 2:
        raise ContractViolation("token_similarity expects 2-D blocks")
    if ft.shape[1] != fv.shape[1]:
        raise ContractViolation(f"embedding widths differ: {ft.shape[1]} vs {fv.shape[1]}")
    zero = set(int(i) for i in text_zero_rows)
    for name, block in (("text", ft), ("image", fv)):
        norms = np.sqrt((block * block).sum(axis=1))
        for i, n in enumerate(norms):
            if name == "text" and i in zero:
                if n != 0.0:
                    raise ContractViolation(f"text row {i} flagged zero but has norm {n}")
                continue
            if abs(n - 1.0) > _SIM_TOL:
                raise ContractViolation(f"{name} row {i} not unit-norm (|{n}| - 1 > {_SIM_TOL})")
    s = ft @ fv.T
    if zero:
        s[sorted(zero), :] = 0.0
    return SimilarityMatrix(s)


def noise_levels(sim: SimilarityMatrix) -> np.ndarray:
    """Per-token noise level: one minus the row-wise best similarity."""
    v = sim.values
    if v.shape[0] == 0:
        return np.zeros(0)
    if v.shape[1] == 0:
        raise ContractViolation("similarity matrix has no image tokens")
    return 1.0 - v.max(axis=1)


@dataclass(frozen=True)
class RecenterResult:
    """Clamped probabilities plus the diagnostics the invariants are stated on."""

    probs: tuple[float, ...]
    unclamped: tuple[float, ...]

    @property
    def unclamped_mean(self) -> float:
        return float(np.mean(self.unclamped))

    @property
    def clamped_mean(self) -> float:
        return float(np.mean(self.probs))


def recenter(r: Sequence[float], p: float, clamp: tuple[float, float] = (0.0, 1.0)) -> RecenterResult:
    """Shift noise levels so their mean equals p, then clamp into bounds.

    The unclamped values always average exactly p; clamping may pull the
    served mean slightly below it, which the result reports.
    """
    arr = np.asarray(r, dtype=np.float64)
    if arr.size == 0:
        raise ContractViolation("recenter needs at least one noise level")
    if not 0.0 <= p <= 1.0:
        raise ContractViolation("masking ratio must lie in [0, 1]")
    unclamped = arr - arr.mean() + p
    probs = np.clip(unclamped, clamp[0], clamp[1])
    return RecenterResult(probs=tuple(float(x) for x in probs), unclamped=tuple(float(x) for x in unclamped))


def _quantize(x: float) -> float:
    # 6 decimal places, matching the snapshot wire format exactly so that a
    # save/load round trip is lossless and resumed runs stay bit-identical.
    return float(f"{x:.6f}")


@dataclass(frozen=True)
class TableEvent:
    op: str  # "read" | "write"
    caption_id: str
    epoch: int


class NoiseTable:
    """Per-caption masking probabilities with epoch-delayed visibility.

    Writes for epoch e become readable at epoch e + 1; a read during the
    writing epoch still sees the previous entry (or the constant-p cold
    start). Multi-reader within an epoch, single-writer.
    """

    def __init__(self, audit: bool = True):
        self._current: dict[str, tuple[int, tuple[float, ...]]] = {}
        self._previous: dict[str, tuple[int, tuple[float, ...]]] = {}
        self.audit_enabled = audit
        self.audit: list[TableEvent] = []

    def __len__(self) -> int:
        return len(self._current)

    def update(self, caption_id: str, probs: Sequence[float], epoch: int) -> None:
        vals = tuple(_quantize(float(x)) for x in probs)
        for v in vals:
            if not 0.0 <= v <= 1.0:
                raise ContractViolation("stored probabilities must lie in [0, 1]")
        existing = self._current.get(caption_id)
        if existing is not None:
            if len(existing[1]) != len(vals):
                raise ContractViolation(
                    f"caption {caption_id!r} changed token count "
                    f"({len(existing[1])} -> {len(vals)})"
                )
            if existing[0] < epoch:
                self._previous[caption_id] = existing
        self._current[caption_id] = (int(epoch), vals)
        if self.audit_enabled:
            self.audit.append(TableEvent("write", caption_id, int(epoch)))

    def fetch(self, caption_id: str, token_count: int, epoch: int, p: float) -> list[float]:
        if token_count < 0:
            raise ContractViolation("token_count must be >= 0")
        if self.audit_enabled:
            self.audit.append(TableEvent("read", caption_id, int(epoch)))
        for store in (self._current, self._previous):
            entry = store.get(caption_id)
            if entry is not None and entry[0] < epoch:
                if len(entry[1]) != token_count:
                    raise ContractViolation(
                        f"caption {caption_id!r}: stored {len(entry[1])} probabilities, "
                        f"caller expects {token_count}"
                    )
                return list(entry[1])
        return [float(p)] * token_count

    def entries(self) -> dict[str, tuple[int, tuple[float, ...]]]:
        return dict(self._current)

    def same_epoch_read_after_write(self) -> list[TableEvent]:
        """Audit reads that happened after a write to the same caption within
        one epoch; the training protocol must keep this empty."""
        written: set[tuple[str, int]] = set()
        offending = []
        for ev in self.audit:
            key = (ev.caption_id, ev.epoch)
            if ev.op == "write":
                written.add(key)
            elif key in written:
                offending.append(ev)
        return offending

    def save(self, path) -> None:
        """JSON lines: one record per caption with epoch and 6-decimal probs.

        Values are quantized to 6 decimals at write time, so the fixed-width
        number literals parse back to exactly the stored floats.
        """
        lines = []
        for caption_id in sorted(self._current):
            epoch, vals = self._current[caption_id]
            probs = ", ".join(f"{v:.6f}" for v in vals)
            lines.append(
                f'{{"caption_id": {json.dumps(caption_id)}, "epoch": {epoch}, "probs": [{probs}]}}'
            )
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def load(cls, path, audit: bool = True) -> "NoiseTable":
        table = cls(audit=audit)
        for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                caption_id = rec["caption_id"]
                epoch = int(rec["epoch"])
                probs = tuple(float(x) for x in rec["probs"])
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{path}:{ln}: bad noise-table record") from exc
            table._current[caption_id] = (epoch, probs)
        return table
