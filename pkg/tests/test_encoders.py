import numpy as np
import pytest

from namtde.encoders import (
    EncoderConfig,
    encode_image,
    encode_text,
    forward_blocks,
    init_params,
    params_checksum,
    patchify,
)
from namtde import numerics as nm
from namtde.errors import ContractViolation
from namtde.numerics import ComputationRecord, Tensor
from namtde.tokenizer import build_vocab, tokenize


CFG = EncoderConfig(depth=2, width=16, heads=2, image_tokens=4, patch_dim=6, vocab_size=12, tap_layer=2)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, seed=3)


def test_init_deterministic_and_seed_sensitive():
    a = init_params(CFG, seed=1)
    b = init_params(CFG, seed=1)
    c = init_params(CFG, seed=2)
    assert params_checksum(a) == params_checksum(b)
    assert params_checksum(a) != params_checksum(c)


def test_attention_parameter_shapes():
    cfg = EncoderConfig(depth=1, width=8, heads=2, image_tokens=2, patch_dim=4, vocab_size=8, tap_layer=1)
    p = init_params(cfg, seed=0)
    for name in ("wq", "wk", "wv", "wo"):
        assert p[f"img.b0.{name}"].shape == (8, 8)
        assert p[f"txt.b0.{name}"].shape == (8, 8)


def test_config_validation():
    with pytest.raises(ContractViolation):
        EncoderConfig(depth=2, width=15, heads=2)
    with pytest.raises(ContractViolation):
        EncoderConfig(depth=2, width=16, heads=2, tap_layer=3)


def test_encode_image_shapes(params):
    patches = np.random.default_rng(0).standard_normal((4, 6))
    out = encode_image(patches, params, CFG)
    assert out.global_embedding.shape == (1, 16)
    assert out.tap.shape == (4, 16)


def test_encode_image_rejects_bad_rows(params):
    with pytest.raises(ContractViolation):
        encode_image(np.zeros((3, 6)), params, CFG)
    with pytest.raises(ContractViolation):
        encode_image(np.zeros((4, 5)), params, CFG)


def test_encode_image_deterministic(params):
    patches = np.random.default_rng(1).standard_normal((4, 6))
    a = encode_image(patches, params, CFG)
    b = encode_image(patches, params, CFG)
    assert np.array_equal(a.global_embedding.data, b.global_embedding.data)
    assert np.array_equal(a.tap.data, b.tap.data)


def test_patch_permutation_equivariance_with_positions_zeroed():
    cfg = CFG
    params = init_params(cfg, seed=9)
    params["img.pos"] = Tensor(np.zeros_like(params["img.pos"].data), _validate=False)
    patches = np.random.default_rng(2).standard_normal((4, 6))
    base = encode_image(patches, params, cfg)
    swapped = patches[[1, 0, 2, 3]]
    out = encode_image(swapped, params, cfg)
    assert np.allclose(out.tap.data, base.tap.data[[1, 0, 2, 3]], atol=1e-12)


def _vocab_and_seq(text="red fox jumps high"):
    vocab = build_vocab([text + " spare words here"], 1)
    return vocab, tokenize(text, vocab)


def test_encode_text_shapes(params):
    vocab, seq = _vocab_and_seq()
    out = encode_text(seq, params, CFG)
    assert out.global_embedding.shape == (1, 16)
    assert out.tap.shape == (seq.word_count, 16)


def test_encode_text_padding_invariance(params):
    vocab, seq = _vocab_and_seq()
    trimmed_ids = seq.ids[: seq.eos_index + 1]
    short = type(seq)(
        caption_id=seq.caption_id,
        ids=trimmed_ids,
        special_mask=seq.special_mask[: seq.eos_index + 1],
    )
    a = encode_text(seq, params, CFG)
    b = encode_text(short, params, CFG)
    assert np.array_equal(a.global_embedding.data, b.global_embedding.data)
    assert np.array_equal(a.tap.data, b.tap.data)


def test_encode_text_deterministic(params):
    _, seq = _vocab_and_seq()
    a = encode_text(seq, params, CFG)
    b = encode_text(seq, params, CFG)
    assert np.array_equal(a.global_embedding.data, b.global_embedding.data)


def test_tap_layer_consistency_last_layer(params):
    cfg_last = EncoderConfig(
        depth=CFG.depth,
        width=CFG.width,
        heads=CFG.heads,
        image_tokens=CFG.image_tokens,
        patch_dim=CFG.patch_dim,
        vocab_size=CFG.vocab_size,
        tap_layer=CFG.depth,
    )
    _, seq = _vocab_and_seq()
    out = encode_text(seq, params, cfg_last)
    rows = out.last_hidden.data[1 : seq.eos_index]
    norms = np.sqrt((rows**2).sum(axis=1, keepdims=True))
    assert np.allclose(out.tap.data, rows / norms, atol=1e-15)


def test_tap_gradients_flow_to_params(params):
    rec = ComputationRecord()
    patches = np.random.default_rng(3).standard_normal((4, 6))
    out = encode_image(patches, params, CFG, rec)
    loss = nm.reduce_sum(out.tap, record=rec)
    nm.backward(rec, loss)
    assert params["img.patch_w"].grad is not None
    assert np.any(params["img.patch_w"].grad != 0.0)
    for p in params.values():
        p.grad = None


def test_patchify_means():
    img = np.arange(16.0).reshape(4, 4)
    block = patchify(img, 2, 2, 1)
    assert block.shape == (4, 1)
    assert block[0, 0] == np.mean([0, 1, 4, 5])
    with pytest.raises(ContractViolation):
        patchify(img, 3, 2, 1)
