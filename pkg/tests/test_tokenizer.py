import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from namtde.errors import ContractViolation
from namtde.tokenizer import (
    EOS_ID,
    MASK_ID,
    MAX_LEN,
    PAD_ID,
    SOS_ID,
    UNK_ID,
    TokenSequence,
    apply_mask,
    build_vocab,
    detokenize,
    load_vocab,
    masked_positions,
    save_vocab,
    split_words,
    tokenize,
)


def test_build_vocab_lexicographic_ids():
    vocab = build_vocab(["a man", "a woman"], min_freq=1)
    assert vocab.word_ids == {"a": 5, "man": 6, "woman": 7}


def test_build_vocab_empty_corpus():
    vocab = build_vocab([], min_freq=1)
    assert vocab.size == 5
    assert vocab.word_ids == {}


def test_build_vocab_min_freq_filters():
    vocab = build_vocab(["a man", "a woman"], min_freq=2)
    assert set(vocab.word_ids) == {"a"}


def test_tokenize_empty_string():
    vocab = build_vocab(["a man"], 1)
    seq = tokenize("", vocab)
    assert seq.ids[0] == SOS_ID and seq.ids[1] == EOS_ID
    assert all(t == PAD_ID for t in seq.ids[2:])
    assert len(seq.ids) == MAX_LEN


def test_tokenize_simple_sentence():
    vocab = build_vocab(["a man"], 1)
    seq = tokenize("A man.", vocab)
    assert seq.ids[:4] == (SOS_ID, 5, 6, EOS_ID)
    assert all(t == PAD_ID for t in seq.ids[4:])
    assert seq.special_mask[:4] == (True, False, False, True)


def test_tokenize_truncates_long_caption():
    vocab = build_vocab(["w"], 1)
    seq = tokenize(" ".join(["w"] * 100), vocab)
    assert len(seq.ids) == MAX_LEN
    assert seq.ids[76] == EOS_ID
    assert seq.word_count == 75


def test_tokenize_unknown_words_to_unk():
    vocab = build_vocab(["a man"], 1)
    seq = tokenize("a zebra", vocab)
    assert seq.ids[2] == UNK_ID


def test_detokenize_fixpoint_on_in_vocab_text():
    vocab = build_vocab(["the red fox jumps"], 1)
    seq = tokenize("The red FOX jumps!", vocab)
    text = detokenize(seq, vocab)
    assert text == "the red fox jumps"
    assert tokenize(text, vocab).ids == seq.ids


def test_sequence_invariants_enforced():
    with pytest.raises(ContractViolation):
        TokenSequence("x", (EOS_ID, SOS_ID), (True, True))
    with pytest.raises(ContractViolation):
        TokenSequence("x", (SOS_ID, EOS_ID, 5), (True, True, False))


def test_apply_mask_all_zero_is_identity():
    vocab = build_vocab(["a man walks"], 1)
    seq = tokenize("a man walks", vocab)
    out = apply_mask(seq, [0.0, 0.0, 0.0], np.random.default_rng(0))
    assert out.ids == seq.ids


def test_apply_mask_all_one_masks_every_word():
    vocab = build_vocab(["a man walks"], 1)
    seq = tokenize("a man walks", vocab)
    out = apply_mask(seq, [1.0, 1.0, 1.0], np.random.default_rng(0))
    assert [out.ids[p] for p in seq.word_positions] == [MASK_ID] * 3
    assert out.ids[0] == SOS_ID and out.ids[4] == EOS_ID
    assert masked_positions(seq, out) == (1, 2, 3)


def test_apply_mask_rate_monte_carlo():
    vocab = build_vocab(["w x y z q r s t u v"], 1)
    seq = tokenize("w x y z q r s t u v", vocab)
    rng = np.random.default_rng(7)
    draws = 0
    masked = 0
    for _ in range(10_000):
        out = apply_mask(seq, [0.15] * 10, rng)
        draws += 10
        masked += sum(1 for p in seq.word_positions if out.ids[p] == MASK_ID)
    assert draws == 100_000
    assert 0.14 <= masked / draws <= 0.16


def test_apply_mask_length_mismatch():
    vocab = build_vocab(["a man"], 1)
    seq = tokenize("a man", vocab)
    with pytest.raises(ContractViolation):
        apply_mask(seq, [0.5], np.random.default_rng(0))


def test_apply_mask_reproducible():
    vocab = build_vocab(["a b c d e f"], 1)
    seq = tokenize("a b c d e f", vocab)
    a = apply_mask(seq, [0.5] * 6, np.random.default_rng(42))
    b = apply_mask(seq, [0.5] * 6, np.random.default_rng(42))
    assert a.ids == b.ids


@given(st.text(max_size=60), st.integers(0, 2**30))
@settings(max_examples=60, deadline=None)
def test_apply_mask_never_touches_specials(text, seed):
    vocab = build_vocab([text], 1)
    seq = tokenize(text, vocab)
    out = apply_mask(seq, [1.0] * seq.word_count, np.random.default_rng(seed))
    for pos, special in enumerate(seq.special_mask):
        if special:
            assert out.ids[pos] == seq.ids[pos]


@given(st.text(alphabet=st.characters(whitelist_categories=("Ll", "Nd", "Zs")), max_size=50))
@settings(max_examples=60, deadline=None)
def test_tokenize_total_and_bounded(text):
    vocab = build_vocab([text], 1)
    seq = tokenize(text, vocab)
    assert len(seq.ids) == MAX_LEN
    assert seq.word_count == min(len(split_words(text)), 75)


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["red fox", "blue fox"], 1)
    path = tmp_path / "vocab.txt"
    save_vocab(path, vocab)
    lines = path.read_text().splitlines()
    assert lines[0] == "[SOS]\t0"
    assert load_vocab(path).word_ids == vocab.word_ids
