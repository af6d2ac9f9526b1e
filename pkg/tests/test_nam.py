import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from namtde.errors import ContractViolation
from namtde.nam import (
    NamConfig,
    NoiseTable,
    SimilarityMatrix,
    noise_levels,
    recenter,
    token_similarity,
)


def test_token_similarity_identical_unit_vectors():
    v = np.array([[1.0, 0.0]])
    sim = token_similarity(v, v)
    assert sim.values.shape == (1, 1)
    assert sim.values[0, 0] == 1.0


def test_token_similarity_orthogonal():
    sim = token_similarity(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert sim.values[0, 0] == 0.0


def test_token_similarity_hand_dot_products():
    f_t = np.array([[0.6, 0.8]])
    f_v = np.array([[1.0, 0.0], [0.0, 1.0]])
    sim = token_similarity(f_t, f_v)
    assert np.allclose(sim.values, [[0.6, 0.8]], atol=1e-15)


def test_token_similarity_requires_unit_rows():
    with pytest.raises(ContractViolation):
        token_similarity(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]))


def test_token_similarity_width_mismatch():
    with pytest.raises(ContractViolation):
        token_similarity(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))


def test_token_similarity_zero_row_scores_zero():
    f_t = np.array([[0.0, 0.0], [1.0, 0.0]])
    f_v = np.array([[1.0, 0.0]])
    sim = token_similarity(f_t, f_v, text_zero_rows=(0,))
    assert sim.values[0, 0] == 0.0
    assert sim.values[1, 0] == 1.0


def test_noise_levels_perfect_and_null_rows():
    assert np.allclose(noise_levels(SimilarityMatrix(np.ones((2, 3)))), [0.0, 0.0])
    assert np.allclose(noise_levels(SimilarityMatrix(np.zeros((2, 3)))), [1.0, 1.0])


def test_noise_levels_spec_matrix():
    sim = SimilarityMatrix(np.array([[0.9, 0.5, 0.2], [0.1, 0.0, -0.2]]))
    r = noise_levels(sim)
    assert np.allclose(r, [0.1, 0.9], atol=1e-12)


@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_noise_levels_bounded(n, m, seed):
    values = np.random.default_rng(seed).uniform(-1, 1, size=(n, m))
    r = noise_levels(SimilarityMatrix(values))
    assert np.all(r >= 0.0) and np.all(r <= 2.0)


def test_recenter_constant_levels():
    res = recenter([0.4, 0.4, 0.4], 0.15)
    assert np.allclose(res.probs, (0.15, 0.15, 0.15), atol=1e-12)


def test_recenter_single_element():
    res = recenter([0.3], 0.15)
    assert np.allclose(res.probs, (0.15,), atol=1e-12)


def test_recenter_spec_vector():
    res = recenter([0.1, 0.9], 0.15)
    assert np.allclose(res.unclamped, (-0.25, 0.55), atol=1e-12)
    assert np.allclose(res.probs, (0.0, 0.55), atol=1e-12)
    assert abs(res.unclamped_mean - 0.15) <= 1e-12


def test_recenter_empty_rejected():
    with pytest.raises(ContractViolation):
        recenter([], 0.15)


@given(
    st.lists(st.floats(0, 2), min_size=1, max_size=30),
    st.floats(0.01, 0.5),
)
@settings(max_examples=80, deadline=None)
def test_recenter_unclamped_mean_is_p(levels, p):
    res = recenter(levels, p)
    assert abs(res.unclamped_mean - p) <= 1e-12
    assert all(0.0 <= v <= 1.0 for v in res.probs)


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=8), st.integers(0, 6))
@settings(max_examples=60, deadline=None)
def test_recenter_monotone_in_dominance(base_row, extra_idx):
    # A token whose similarities dominate another's gets a lower unclamped
    # probability.
    n = len(base_row)
    dominated = np.clip(np.array(base_row), -1, 1)
    dominating = np.clip(dominated + 0.25, -1, 1)
    if np.allclose(dominating, dominated):
        return
    sim = SimilarityMatrix(np.vstack([dominating, dominated]))
    r = noise_levels(sim)
    res = recenter(r, 0.15)
    assert res.unclamped[0] <= res.unclamped[1]


def test_nam_config_validation():
    with pytest.raises(ContractViolation):
        NamConfig(p=1.5)
    with pytest.raises(ContractViolation):
        NamConfig(clamp=(0.5, 0.2))


class TestNoiseTable:
    def test_cold_start_constant_p(self):
        table = NoiseTable()
        assert table.fetch("c1", 4, epoch=1, p=0.15) == [0.15] * 4

    def test_write_then_visible_next_epoch(self):
        table = NoiseTable()
        table.update("c1", [0.0, 0.55], epoch=1)
        assert table.fetch("c1", 2, epoch=2, p=0.15) == [0.0, 0.55]

    def test_same_epoch_write_not_visible(self):
        table = NoiseTable()
        table.update("c1", [0.1, 0.1], epoch=1)
        table.update("c1", [0.9, 0.9], epoch=2)
        assert table.fetch("c1", 2, epoch=2, p=0.15) == [0.1, 0.1]

    def test_epoch_one_always_constant(self):
        table = NoiseTable()
        table.update("c1", [0.9], epoch=1)
        assert table.fetch("c1", 1, epoch=1, p=0.15) == [0.15]

    def test_token_count_change_rejected(self):
        table = NoiseTable()
        table.update("c1", [0.1, 0.2], epoch=1)
        with pytest.raises(ContractViolation):
            table.update("c1", [0.1], epoch=2)

    def test_fetch_length_mismatch_rejected(self):
        table = NoiseTable()
        table.update("c1", [0.1, 0.2], epoch=1)
        with pytest.raises(ContractViolation):
            table.fetch("c1", 3, epoch=2, p=0.15)

    def test_audit_flags_same_epoch_read_after_write(self):
        table = NoiseTable()
        table.fetch("c1", 1, epoch=1, p=0.15)
        table.update("c1", [0.3], epoch=1)
        assert table.same_epoch_read_after_write() == []
        table.fetch("c1", 1, epoch=1, p=0.15)
        offending = table.same_epoch_read_after_write()
        assert len(offending) == 1 and offending[0].op == "read"

    def test_snapshot_round_trip(self, tmp_path):
        table = NoiseTable()
        table.update("c1", [0.123456789, 1.0], epoch=3)
        table.update("c2", [0.0], epoch=2)
        path = tmp_path / "table.jsonl"
        table.save(path)
        loaded = NoiseTable.load(path)
        assert loaded.entries() == table.entries()
        # 6-decimal quantization happened at write time, so the file is exact.
        assert table.entries()["c1"][1] == (0.123457, 1.0)
