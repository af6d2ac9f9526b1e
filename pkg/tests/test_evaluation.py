import csv

import numpy as np
import pytest

from namtde.corpus import gen_corpus
from namtde.errors import ContractViolation
from namtde.evaluation import (
    AblationRow,
    ablate,
    evaluate,
    mean_ap,
    noise_detection,
    rank_k,
    roc_auc,
    save_ablation_csv,
    untrained_state,
)
from namtde.trainer import TrainConfig, train


def brute_force_metrics(sim, query_ids, gallery_ids, k_values):
    """Loop-and-sort transcription of rank-k and AP, kept deliberately naive."""
    rank_hits = {k: 0 for k in k_values}
    ap_total = 0.0
    for qi, qid in enumerate(query_ids):
        scored = sorted(
            [(float(-sim[qi][gi]), gi) for gi in range(len(gallery_ids))]
        )
        ordered = [gi for _, gi in scored]
        for k in k_values:
            if any(gallery_ids[gi] == qid for gi in ordered[:k]):
                rank_hits[k] += 1
        seen = 0
        precisions = []
        for rank, gi in enumerate(ordered, start=1):
            if gallery_ids[gi] == qid:
                seen += 1
                precisions.append(seen / rank)
        ap_total += sum(precisions) / len(precisions)
    n = len(query_ids)
    return {k: rank_hits[k] / n for k in k_values}, ap_total / n


def test_rank1_perfect_diagonal():
    sim = np.eye(4)
    assert rank_k(sim, [0, 1, 2, 3], [0, 1, 2, 3], 1) == 1.0


def test_rank_k_hand_ranks():
    # Correct items at ranks 1, 2, 4 for the three queries.
    sim = np.array(
        [
            [0.9, 0.5, 0.4, 0.3],
            [0.8, 0.7, 0.1, 0.0],
            [0.9, 0.8, 0.7, 0.6],
        ]
    )
    query_ids = ["a", "b", "c"]
    gallery_ids = ["a", "b", "x", "c"]
    assert rank_k(sim, query_ids, gallery_ids, 1) == pytest.approx(1 / 3)
    assert rank_k(sim, query_ids, gallery_ids, 5) == 1.0


def test_rank_k_window_covers_gallery():
    sim = np.random.default_rng(0).standard_normal((3, 4))
    assert rank_k(sim, ["a", "b", "c"], ["c", "b", "a", "z"], 4) == 1.0


def test_rank_k_requires_matching_gallery():
    with pytest.raises(ContractViolation):
        rank_k(np.ones((1, 2)), ["q"], ["a", "b"], 1)


def test_mean_ap_single_relevant_closed_form():
    sim = np.array([[0.5, 0.9, 0.1]])
    # Relevant item lands at rank 2.
    assert mean_ap(sim, ["a"], ["a", "b", "c"]) == pytest.approx(1 / 2)


def test_mean_ap_two_relevants():
    sim = np.array([[0.9, 0.8, 0.7]])
    # Relevants at ranks 1 and 3.
    assert mean_ap(sim, ["a"], ["a", "b", "a"]) == pytest.approx((1 + 2 / 3) / 2)


def test_ties_break_toward_lower_gallery_index():
    sim = np.array([[0.5, 0.5]])
    assert rank_k(sim, ["b"], ["a", "b"], 1) == 0.0
    sim2 = np.array([[0.5, 0.5]])
    assert rank_k(sim2, ["a"], ["a", "b"], 1) == 1.0


def test_metrics_match_brute_force_oracle_on_random_instances():
    rng = np.random.default_rng(123)
    for trial in range(200):
        q = int(rng.integers(1, 21))
        g = int(rng.integers(2, 51))
        n_ids = int(rng.integers(1, max(2, g // 2) + 1))
        gallery_ids = [int(rng.integers(n_ids)) for _ in range(g)]
        query_ids = [gallery_ids[int(rng.integers(g))] for _ in range(q)]
        sim = rng.standard_normal((q, g))
        expected_ranks, expected_map = brute_force_metrics(sim, query_ids, gallery_ids, (1, 5, 10))
        assert abs(rank_k(sim, query_ids, gallery_ids, 1) - expected_ranks[1]) <= 1e-9
        assert abs(rank_k(sim, query_ids, gallery_ids, 5) - expected_ranks[5]) <= 1e-9
        assert abs(rank_k(sim, query_ids, gallery_ids, 10) - expected_ranks[10]) <= 1e-9
        assert abs(mean_ap(sim, query_ids, gallery_ids) - expected_map) <= 1e-9


def test_roc_auc_separable_and_random():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [True, True, False, False]) == 1.0
    assert roc_auc([0.1, 0.9], [True, False]) == 0.0
    rng = np.random.default_rng(0)
    scores = rng.random(4000)
    labels = rng.random(4000) < 0.5
    assert abs(roc_auc(scores, labels) - 0.5) < 0.03


def test_roc_auc_needs_both_classes():
    with pytest.raises(ContractViolation):
        roc_auc([0.5, 0.6], [True, True])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("eval") / "ds"
    return gen_corpus(out, n_identities=200, images_per_identity=2, noise_rate=0.3, seed=8)


def test_untrained_rank1_is_chance_level(dataset):
    cfg = TrainConfig(epochs=0, batch_size=8, seed=5)
    state = untrained_state(dataset, cfg)
    result = evaluate(state, dataset)
    n_test_ids = len(dataset.split.test_identities)
    n_queries = len(result.per_query_ranks)
    chance = 1.0 / n_test_ids
    sigma = np.sqrt(chance * (1 - chance) / n_queries)
    assert abs(result.rank1 - chance) <= 3 * sigma


def test_evaluate_pure(dataset):
    cfg = TrainConfig(epochs=0, batch_size=8, seed=5)
    state = untrained_state(dataset, cfg)
    a = evaluate(state, dataset)
    b = evaluate(state, dataset)
    assert a == b


def test_evaluate_monotone_rank_fractions(dataset):
    state = untrained_state(dataset, TrainConfig(epochs=0, batch_size=8, seed=1))
    res = evaluate(state, dataset)
    assert res.rank1 <= res.rank5 <= res.rank10


def test_noise_detection_report_fields(dataset):
    state = untrained_state(dataset, TrainConfig(epochs=0, batch_size=8, seed=5))
    report = noise_detection(state, dataset)
    assert 0.0 <= report.auc <= 1.0
    assert report.tokens_scored > 1000


def test_ablate_writes_csv(tmp_path, dataset):
    cfg = TrainConfig(epochs=1, batch_size=8, seed=0)
    out = tmp_path / "rows.csv"
    rows = ablate(dataset, cfg, "mask_mode", ["none"], seeds=(0,), out_csv=out, with_auc=False)
    assert len(rows) == 1
    with open(out) as fh:
        parsed = list(csv.DictReader(fh))
    assert parsed[0]["sweep_value"] == "none"
    assert set(parsed[0]) == {"sweep_value", "seed", "rank1", "rank5", "rank10", "map", "auc"}


def test_ablate_rejects_unknown_sweep(dataset):
    with pytest.raises(ContractViolation):
        ablate(dataset, TrainConfig(epochs=1, batch_size=8), "flavor", ["x"])


def test_save_ablation_csv_round_trippable(tmp_path):
    rows = [AblationRow("nam", 0, 0.5, 0.7, 0.8, 0.4, 0.66)]
    path = tmp_path / "a.csv"
    save_ablation_csv(path, rows)
    with open(path) as fh:
        parsed = list(csv.DictReader(fh))
    assert float(parsed[0]["rank1"]) == 0.5
    assert float(parsed[0]["auc"]) == 0.66
