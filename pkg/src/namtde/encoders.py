"""Miniature pre-norm transformer image and text encoders.

Both towers expose a global embedding (the [CLS] row for images, the [EOS]
row for text, both from the last block) and a tap: the token embeddings of
an intermediate block, row L2-normalized so downstream token-to-patch
products are true cosine similarities.

Parameters are read-only during forward passes; concurrent forwards over
disjoint records are safe. Updates are single-writer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nm
from .errors import ContractViolation
from .numerics import ComputationRecord, Tensor
from .tokenizer import MAX_LEN, TokenSequence


@dataclass(frozen=True)
class EncoderConfig:
    """Desk-scale tower geometry.

    Two blocks of width 64 train reliably from random init on the synthetic
    corpus; deeper or narrower towers stall on the contrastive plateau. The
    default tap is the last block: its token embeddings are the ones the
    global loss shapes directly, which is what makes token-to-patch
    similarity informative enough for noise detection at this scale.
    """

    depth: int = 2
    width: int = 64
    heads: int = 4
    image_tokens: int = 12
    patch_dim: int = 32
    vocab_size: int = 64
    max_text_len: int = MAX_LEN
    tap_layer: int = 2  # 1-based block index feeding token-level similarity

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.heads < 1:
            raise ContractViolation("depth, width and heads must be positive")
        if self.width % self.heads != 0:
            raise ContractViolation("width must be divisible by heads")
        if not 1 <= self.tap_layer <= self.depth:
            raise ContractViolation("tap_layer must lie in [1, depth]")
        if self.image_tokens < 1:
            raise ContractViolation("image_tokens must be >= 1")
        if self.patch_dim < 1 or self.vocab_size < 1 or self.max_text_len < 2:
            raise ContractViolation("patch_dim, vocab_size, max_text_len must be positive")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclass(frozen=True)
class EncoderOutput:
    """Global embedding (1, d), tap block (tokens, d), and the full last
    block output kept around for heads that read other positions."""

    global_embedding: Tensor
    tap: Tensor
    last_hidden: Tensor


Params = dict[str, Tensor]


def _param_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, int], str]]:
    d, h = config.width, 4 * config.width
    shapes: list[tuple[str, tuple[int, int], str]] = []
    shapes.append(("img.patch_w", (config.patch_dim, d), "weight"))
    shapes.append(("img.patch_b", (1, d), "zero"))
    shapes.append(("img.cls", (1, d), "embed"))
    shapes.append(("img.pos", (config.image_tokens + 1, d), "embed"))
    shapes.append(("txt.tok", (config.vocab_size, d), "embed"))
    shapes.append(("txt.pos", (config.max_text_len, d), "embed"))
    for tower in ("img", "txt"):
        for i in range(config.depth):
            p = f"{tower}.b{i}."
            shapes.append((p + "ln1_g", (1, d), "one"))
            shapes.append((p + "ln1_b", (1, d), "zero"))
            for name in ("wq", "wk", "wv", "wo"):
                shapes.append((p + name, (d, d), "weight"))
            for name in ("bq", "bk", "bv", "bo"):
                shapes.append((p + name, (1, d), "zero"))
            shapes.append((p + "ln2_g", (1, d), "one"))
            shapes.append((p + "ln2_b", (1, d), "zero"))
            shapes.append((p + "w1", (d, h), "weight"))
            shapes.append((p + "b1", (1, h), "zero"))
            shapes.append((p + "w2", (h, d), "weight"))
            shapes.append((p + "b2", (1, d), "zero"))
    shapes.append(("mlm.w", (d, config.vocab_size), "weight"))
    shapes.append(("mlm.b", (1, config.vocab_size), "zero"))
    return shapes


_STRUCTURAL_EMBED_SCALE = 0.1  # see init_params


def init_params(config: EncoderConfig, seed: int) -> Params:
    """Scaled-uniform init, bound 1/sqrt(fan_in); same seed, same bits.

    Structural embeddings ([CLS], positions, the reserved text tokens) start
    ten times smaller than word embeddings. They are shared across examples,
    and if they dominate the readout rows at init, every global embedding
    points the same way and contrastive training stalls on the uniform
    plateau before content can differentiate.
    """
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape, kind in _param_shapes(config):
        if kind == "weight":
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "embed":
            bound = 1.0 / np.sqrt(config.width)
            data = rng.uniform(-bound, bound, size=shape)
            if name in ("img.cls", "img.pos", "txt.pos"):
                data *= _STRUCTURAL_EMBED_SCALE
            elif name == "txt.tok":
                data[:5] *= _STRUCTURAL_EMBED_SCALE
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, _validate=False)
    return params


def _affine_norm(x, params, prefix, record):
    y = nm.layer_norm(x, record=record)
    y = nm.mul(y, params[prefix + "_g"], record)
    return nm.add(y, params[prefix + "_b"], record)


def _attention(x, params, prefix, config, ranges, record):
    q = nm.add(nm.matmul(x, params[prefix + "wq"], record), params[prefix + "bq"], record)
    k = nm.add(nm.matmul(x, params[prefix + "wk"], record), params[prefix + "bk"], record)
    v = nm.add(nm.matmul(x, params[prefix + "wv"], record), params[prefix + "bv"], record)
    o = nm.grouped_attention(q, k, v, ranges, config.heads, record)
    return nm.add(nm.matmul(o, params[prefix + "wo"], record), params[prefix + "bo"], record)


def _block(x, params, prefix, config, ranges, record):
    a = _attention(_affine_norm(x, params, prefix + "ln1", record), params, prefix, config, ranges, record)
    x = nm.add(x, a, record)
    h = _affine_norm(x, params, prefix + "ln2", record)
    h = nm.add(nm.matmul(h, params[prefix + "w1"], record), params[prefix + "b1"], record)
    h = nm.gelu(h, record)
    h = nm.add(nm.matmul(h, params[prefix + "w2"], record), params[prefix + "b2"], record)
    return nm.add(x, h, record)


def forward_blocks(x0, params, tower, config, record=None, upto: int | None = None, ranges=None):
    """Run the tower's blocks (all of them, or the first ``upto``) and return
    every computed block's output, in order.

    ``ranges`` delimits independent examples stacked along the rows; attention
    never crosses a range boundary. Default: all rows are one example.
    """
    if ranges is None:
        ranges = ((0, x0.data.shape[0]),)
    hidden = []
    x = x0
    depth = config.depth if upto is None else upto
    for i in range(depth):
        x = _block(x, params, f"{tower}.b{i}.", config, ranges, record)
        hidden.append(x)
    return hidden


def encode_image(patches, params: Params, config: EncoderConfig, record: ComputationRecord | None = None) -> EncoderOutput:
    """Project patch features, prepend [CLS], run the tower, tap the token rows."""
    pt = patches if isinstance(patches, Tensor) else Tensor(patches)
    if pt.data.ndim != 2 or pt.data.shape[0] != config.image_tokens:
        raise ContractViolation(
            f"expected {config.image_tokens} patch rows, got shape {pt.data.shape}"
        )
    if pt.data.shape[1] != config.patch_dim:
        raise ContractViolation(
            f"expected patch width {config.patch_dim}, got {pt.data.shape[1]}"
        )
    x = nm.add(nm.matmul(pt, params["img.patch_w"], record), params["img.patch_b"], record)
    x = nm.concat_rows([params["img.cls"], x], record)
    x = nm.add(x, params["img.pos"], record)
    hidden = forward_blocks(x, params, "img", config, record)
    last = hidden[-1]
    global_vec = nm.take_rows(last, [0], record)
    # Tap excludes the [CLS] row: only the M patch tokens take part in
    # token-level similarity.
    tap_rows = nm.take_rows(hidden[config.tap_layer - 1], range(1, config.image_tokens + 1), record)
    tap = nm.l2_normalize(tap_rows, record)
    return EncoderOutput(global_embedding=global_vec, tap=tap, last_hidden=last)


def encode_text(seq: TokenSequence, params: Params, config: EncoderConfig, record: ComputationRecord | None = None) -> EncoderOutput:
    """Encode the non-pad prefix of ``seq``.

    [PAD] never enters the tower, which is what makes outputs independent of
    pad count. The global embedding is the last block's [EOS] row; the tap is
    the tap block's word rows, caption order, L2-normalized.
    """
    eos = seq.eos_index
    ids = seq.ids[: eos + 1]
    if max(ids) >= config.vocab_size:
        raise ContractViolation("token id outside encoder vocabulary")
    x = nm.embedding(params["txt.tok"], ids, record)
    x = nm.add(x, nm.take_rows(params["txt.pos"], range(len(ids)), record), record)
    hidden = forward_blocks(x, params, "txt", config, record)
    last = hidden[-1]
    global_vec = nm.take_rows(last, [eos], record)
    word_rows = range(1, eos)
    tap_rows = nm.take_rows(hidden[config.tap_layer - 1], word_rows, record)
    tap = nm.l2_normalize(tap_rows, record)
    return EncoderOutput(global_embedding=global_vec, tap=tap, last_hidden=last)


@dataclass(frozen=True)
class ImageBatchEncoding:
    """Batched image forward: one row per example in ``global_embeddings``;
    ``taps`` holds each example's L2-normalized patch-token block (values)."""

    global_embeddings: Tensor
    taps: list[np.ndarray]
    tap_zero_rows: list[tuple[int, ...]]


def _image_tower_input(blocks, params, config, record):
    m = config.image_tokens
    stacked = np.vstack([np.asarray(b, dtype=np.float64) for b in blocks])
    if stacked.shape != (len(blocks) * m, config.patch_dim):
        raise ContractViolation(
            f"expected {len(blocks)} blocks of ({m}, {config.patch_dim}) patches"
        )
    proj = nm.add(nm.matmul(Tensor(stacked), params["img.patch_w"], record), params["img.patch_b"], record)
    base = nm.concat_rows([params["img.cls"], proj], record)
    idx = []
    for i in range(len(blocks)):
        idx.append(0)  # shared [CLS] row, gradient fans in additively
        idx.extend(range(1 + i * m, 1 + (i + 1) * m))
    x = nm.take_rows(base, idx, record)
    pos = nm.take_rows(params["img.pos"], list(range(m + 1)) * len(blocks), record)
    x = nm.add(x, pos, record)
    ranges = tuple((i * (m + 1), (i + 1) * (m + 1)) for i in range(len(blocks)))
    return x, ranges


def encode_image_batch(
    blocks, params: Params, config: EncoderConfig, record: ComputationRecord | None = None,
    want_taps: bool = True,
) -> ImageBatchEncoding:
    """Encode many images in one tower pass; attention stays per-example."""
    m = config.image_tokens
    x, ranges = _image_tower_input(blocks, params, config, record)
    hidden = forward_blocks(x, params, "img", config, record, ranges=ranges)
    cls_rows = [s for s, _ in ranges]
    globals_ = nm.take_rows(hidden[-1], cls_rows, record)
    taps: list[np.ndarray] = []
    zero_rows: list[tuple[int, ...]] = []
    if want_taps:
        patch_idx = [i for s, e in ranges for i in range(s + 1, e)]
        tap_all = nm.l2_normalize(nm.take_rows(hidden[config.tap_layer - 1], patch_idx, record), record)
        for i in range(len(blocks)):
            taps.append(tap_all.data[i * m : (i + 1) * m])
            zero_rows.append(tuple(z - i * m for z in tap_all.zero_rows if i * m <= z < (i + 1) * m))
    return ImageBatchEncoding(global_embeddings=globals_, taps=taps, tap_zero_rows=zero_rows)


@dataclass(frozen=True)
class TextBatchEncoding:
    """Batched text forward over the non-pad prefixes of many sequences."""

    global_embeddings: Tensor
    last_hidden: Tensor
    offsets: tuple[int, ...]  # row offset of each example inside last_hidden


def _text_tower_input(seqs, params, config, record):
    all_ids: list[int] = []
    pos_ids: list[int] = []
    offsets = []
    at = 0
    for seq in seqs:
        eos = seq.eos_index
        ids = seq.ids[: eos + 1]
        if max(ids) >= config.vocab_size:
            raise ContractViolation("token id outside encoder vocabulary")
        offsets.append(at)
        all_ids.extend(ids)
        pos_ids.extend(range(len(ids)))
        at += len(ids)
    x = nm.embedding(params["txt.tok"], all_ids, record)
    x = nm.add(x, nm.take_rows(params["txt.pos"], pos_ids, record), record)
    ranges = tuple(
        (offsets[i], offsets[i + 1] if i + 1 < len(offsets) else at) for i in range(len(offsets))
    )
    return x, ranges, tuple(offsets)


def encode_text_batch(
    seqs, params: Params, config: EncoderConfig, record: ComputationRecord | None = None
) -> TextBatchEncoding:
    x, ranges, offsets = _text_tower_input(seqs, params, config, record)
    hidden = forward_blocks(x, params, "txt", config, record, ranges=ranges)
    eos_rows = [off + seq.eos_index for off, seq in zip(offsets, seqs)]
    globals_ = nm.take_rows(hidden[-1], eos_rows, record)
    return TextBatchEncoding(global_embeddings=globals_, last_hidden=hidden[-1], offsets=offsets)


def text_tap_batch(seqs, params: Params, config: EncoderConfig) -> list[Tensor]:
    """Per-sequence normalized taps from one untracked batched pass."""
    x, ranges, offsets = _text_tower_input(seqs, params, config, None)
    hidden = forward_blocks(x, params, "txt", config, None, upto=config.tap_layer, ranges=ranges)
    tap_src = hidden[config.tap_layer - 1]
    taps = []
    for off, seq in zip(offsets, seqs):
        rows = nm.slice_rows(tap_src, off + 1, off + seq.eos_index) if seq.eos_index > 1 else nm.take_rows(tap_src, [])
        taps.append(nm.l2_normalize(rows))
    return taps


def image_tap(patches, params: Params, config: EncoderConfig) -> Tensor:
    """Just the normalized patch-row tap of the image tower."""
    pt = patches if isinstance(patches, Tensor) else Tensor(patches)
    x = nm.add(nm.matmul(pt, params["img.patch_w"]), params["img.patch_b"])
    x = nm.concat_rows([params["img.cls"], x])
    x = nm.add(x, params["img.pos"])
    hidden = forward_blocks(x, params, "img", config, upto=config.tap_layer)
    tap_rows = nm.take_rows(hidden[config.tap_layer - 1], range(1, config.image_tokens + 1))
    return nm.l2_normalize(tap_rows)


def image_tap_batch(blocks, params: Params, config: EncoderConfig) -> list[Tensor]:
    """Per-image normalized taps from one untracked batched pass."""
    x, ranges = _image_tower_input(blocks, params, config, None)
    hidden = forward_blocks(x, params, "img", config, None, upto=config.tap_layer, ranges=ranges)
    tap_src = hidden[config.tap_layer - 1]
    return [nm.l2_normalize(nm.slice_rows(tap_src, s + 1, e)) for s, e in ranges]


def text_tap(seq: TokenSequence, params: Params, config: EncoderConfig) -> Tensor:
    """Just the normalized word-row tap, running only the blocks below it.

    Bitwise identical to ``encode_text(...).tap`` (blocks never read later
    blocks); used for the untracked pass whose only product is the tap.
    """
    eos = seq.eos_index
    ids = seq.ids[: eos + 1]
    if max(ids) >= config.vocab_size:
        raise ContractViolation("token id outside encoder vocabulary")
    x = nm.embedding(params["txt.tok"], ids)
    x = nm.add(x, nm.take_rows(params["txt.pos"], range(len(ids))))
    hidden = forward_blocks(x, params, "txt", config, upto=config.tap_layer)
    tap_rows = nm.take_rows(hidden[config.tap_layer - 1], range(1, eos))
    return nm.l2_normalize(tap_rows)


def patchify(image, m_rows: int, m_cols: int, features_per_patch: int):
    """Map a tiny raster image to an (m_rows*m_cols, features_per_patch) block.

    Each non-overlapping cell is split into ``features_per_patch`` contiguous
    pixel chunks whose mean intensities become the patch features.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ContractViolation("patchify expects a 2-D intensity image")
    h, w = img.shape
    if h % m_rows or w % m_cols:
        raise ContractViolation(f"image {img.shape} not divisible into {m_rows}x{m_cols} cells")
    ph, pw = h // m_rows, w // m_cols
    if features_per_patch < 1 or features_per_patch > ph * pw:
        raise ContractViolation("features_per_patch out of range")
    out = np.zeros((m_rows * m_cols, features_per_patch))
    for r in range(m_rows):
        for c in range(m_cols):
            cell = img[r * ph : (r + 1) * ph, c * pw : (c + 1) * pw].reshape(-1)
            chunks = np.array_split(cell, features_per_patch)
            out[r * m_cols + c] = [chunk.mean() for chunk in chunks]
    return out


def params_checksum(params: Params) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
