"""Word-level tokenizer with the bracketing and padding the text encoder expects.

Sequences are bracketed with [SOS]/[EOS] and padded to a fixed 77 slots.
Masking replaces a word id with [MASK] rather than deleting it, so token
positions stay aligned with per-token masking probabilities across epochs.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, FormatError

SOS_ID = 0
EOS_ID = 1
PAD_ID = 2
MASK_ID = 3
UNK_ID = 4

RESERVED_TOKENS = ("[SOS]", "[EOS]", "[PAD]", "[MASK]", "[UNK]")
FIRST_WORD_ID = len(RESERVED_TOKENS)

MAX_LEN = 77
MAX_WORDS = MAX_LEN - 2  # room for the [SOS]/[EOS] brackets

_WORD_RE = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Injective word -> id map; reserved ids 0-4 are fixed, words start at 5."""

    word_ids: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for word, wid in self.word_ids.items():
            if wid < FIRST_WORD_ID:
                raise ContractViolation(f"word {word!r} maps into reserved id range")
            if wid in seen:
                raise ContractViolation(f"duplicate id {wid}")
            seen.add(wid)

    @property
    def size(self) -> int:
        return FIRST_WORD_ID + len(self.word_ids)

    def id_of(self, word: str) -> int:
        return self.word_ids.get(word, UNK_ID)

    def word_of(self, token_id: int) -> str:
        if 0 <= token_id < FIRST_WORD_ID:
            return RESERVED_TOKENS[token_id]
        for word, wid in self.word_ids.items():
            if wid == token_id:
                return word
        raise ContractViolation(f"unknown token id {token_id}")


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Admit every word with frequency >= min_freq, ids in lexicographic order."""
    if min_freq < 1:
        raise ContractViolation("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for caption in corpus:
        counts.update(split_words(caption))
    admitted = sorted(w for w, c in counts.items() if c >= min_freq)
    return Vocabulary({w: FIRST_WORD_ID + i for i, w in enumerate(admitted)})


@dataclass(frozen=True)
class TokenSequence:
    """One caption's padded ids. Specials ([SOS]/[EOS]/[PAD]) are never masked."""

    caption_id: str
    ids: tuple[int, ...]
    special_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.special_mask):
            raise ContractViolation("ids and special_mask lengths differ")
        if len(self.ids) > MAX_LEN:
            raise ContractViolation(f"sequence longer than {MAX_LEN}")
        if not self.ids or self.ids[0] != SOS_ID:
            raise ContractViolation("sequence must start with [SOS]")
        if self.ids.count(EOS_ID) != 1:
            raise ContractViolation("sequence must contain exactly one [EOS]")
        eos = self.ids.index(EOS_ID)
        if any(t != PAD_ID for t in self.ids[eos + 1 :]):
            raise ContractViolation("only [PAD] may follow [EOS]")

    @property
    def eos_index(self) -> int:
        return self.ids.index(EOS_ID)

    @property
    def word_count(self) -> int:
        return self.eos_index - 1

    @property
    def word_positions(self) -> tuple[int, ...]:
        return tuple(range(1, self.eos_index))


def tokenize(text: str, vocab: Vocabulary, caption_id: str = "") -> TokenSequence:
    """Total function: lowercase, split, map unknowns to [UNK], bracket, pad."""
    words = split_words(text)[:MAX_WORDS]
    body = [vocab.id_of(w) for w in words]
    ids = [SOS_ID] + body + [EOS_ID]
    pad = MAX_LEN - len(ids)
    ids.extend([PAD_ID] * pad)
    special = [True] + [False] * len(body) + [True] * (1 + pad)
    return TokenSequence(caption_id=caption_id, ids=tuple(ids), special_mask=tuple(special))


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    """Space-joined words; specials dropped, [MASK]/[UNK] rendered literally."""
    words = []
    for pos in seq.word_positions:
        tid = seq.ids[pos]
        words.append(vocab.word_of(tid).lower() if tid >= FIRST_WORD_ID else RESERVED_TOKENS[tid].lower())
    return " ".join(words)


def apply_mask(seq: TokenSequence, probs: Sequence[float], rng: np.random.Generator) -> TokenSequence:
    """Independently replace each non-special token by [MASK] with its probability.

    Returns a new sequence; the input is never modified. Draws come from the
    supplied generator, one uniform per non-special position, so a fixed seed
    is bit-reproducible.
    """
    positions = seq.word_positions
    if len(probs) != len(positions):
        raise ContractViolation(
            f"{len(probs)} probabilities for {len(positions)} maskable positions"
        )
    p = np.asarray(probs, dtype=np.float64)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ContractViolation("masking probabilities must lie in [0, 1]")
    draws = rng.random(len(positions))
    ids = list(seq.ids)
    for pos, u, pi in zip(positions, draws, p):
        if u < pi:
            ids[pos] = MASK_ID
    return TokenSequence(caption_id=seq.caption_id, ids=tuple(ids), special_mask=seq.special_mask)


def masked_positions(original: TokenSequence, masked: TokenSequence) -> tuple[int, ...]:
    """Sequence positions where apply_mask substituted [MASK]."""
    return tuple(
        pos for pos in original.word_positions if masked.ids[pos] == MASK_ID and original.ids[pos] != MASK_ID
    )


def save_vocab(path, vocab: Vocabulary) -> None:
    """UTF-8 lines "word<TAB>id", reserved tokens first."""
    lines = [f"{tok}\t{i}" for i, tok in enumerate(RESERVED_TOKENS)]
    for word, wid in sorted(vocab.word_ids.items(), key=lambda kv: kv[1]):
        lines.append(f"{word}\t{wid}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    word_ids: dict[str, int] = {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            word, wid_s = line.split("\t")
            wid = int(wid_s)
        except ValueError as exc:
            raise FormatError(f"{path}:{ln}: bad vocabulary line {line!r}") from exc
        if wid < FIRST_WORD_ID:
            if RESERVED_TOKENS[wid] != word:
                raise FormatError(f"{path}:{ln}: reserved token mismatch")
            continue
        word_ids[word] = wid
    return Vocabulary(word_ids)
