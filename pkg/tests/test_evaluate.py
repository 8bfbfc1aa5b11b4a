import numpy as np
import pytest

from iagnn import evaluate as ev
from iagnn.data import Example
from iagnn.evaluate import (
    batch_ranks,
    brute_force_rank,
    evaluate,
    evaluate_scorer,
    popularity_baseline,
    rank_and_score,
    report_from_ranks,
)
from iagnn.model import ModelConfig, init_params


def test_rank_three_within_ten():
    scores = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
    assert rank_and_score(scores, 2, range(5), 10) == (1, pytest.approx(1 / 3))


def test_rank_beyond_k_scores_zero():
    scores = -np.arange(30, dtype=float)
    assert rank_and_score(scores, 24, range(30), 20) == (0, 0.0)


def test_ties_favour_smaller_index():
    scores = np.zeros(6)
    assert rank_and_score(scores, 1, [1, 3, 5], 10) == (1, 1.0)
    assert rank_and_score(scores, 5, [1, 3, 5], 10) == (1, pytest.approx(1 / 3))


def test_bad_k_and_label():
    with pytest.raises(ValueError):
        rank_and_score(np.zeros(3), 0, [0, 1], 0)
    with pytest.raises(ValueError, match="candidate"):
        rank_and_score(np.zeros(3), 2, [0, 1], 5)


def test_report_arithmetic():
    rep = report_from_ranks(np.array([1, 30]), 0)
    assert rep.precision[10] == 0.5 and rep.mrr[10] == 0.5


def test_batch_ranks_match_brute_force_on_random_vectors():
    rng = np.random.default_rng(0)
    B, V = 1000, 40
    scores = np.round(rng.normal(size=(B, V)), 1)  # coarse rounding forces ties
    mask = rng.random((B, V)) < 0.5
    labels = np.array([rng.choice(np.flatnonzero(m)) if m.any() else 0 for m in mask])
    mask[np.arange(B), labels] = True
    ranks = batch_ranks(scores, mask, labels)
    oracle = [brute_force_rank(scores[b], labels[b], np.flatnonzero(mask[b])) for b in range(B)]
    assert ranks.tolist() == oracle


def toy_split():
    ic = np.array([0, 0, 0, 1, 1, 2])
    train = [Example((0,), (0,), c, v) for v, c in [(0, 0), (0, 0), (1, 0), (2, 0), (2, 0), (2, 0), (3, 1), (4, 1), (4, 1), (5, 2)]]
    test = [Example((1,), (0,), ic[v], v) for v in (0, 1, 2, 3, 4, 5, 1, 0, 3, 2)]
    return ic, train, test


def test_popularity_hand_oracle():
    ic, train, test = toy_split()
    # frequencies: item0=2 item1=1 item2=3 | item3=1 item4=2 | item5=1
    # ranks within category: 0->2, 1->3, 2->1, 3->2, 4->1, 5->1
    expect_ranks = [2, 3, 1, 2, 1, 1, 3, 2, 2, 1]
    rep, ranks = evaluate_scorer(popularity_baseline(train, 6), test, ic, return_ranks=True, oracle_fraction=1.0)
    assert ranks.tolist() == expect_ranks
    assert rep.precision[10] == 1.0
    assert rep.mrr[10] == pytest.approx(sum(1 / r for r in expect_ranks) / 10, abs=1e-12)
    assert rep.n_singleton_candidates == 1


def test_popularity_order_and_singleton():
    ic = np.array([0, 0, 1])
    train = [Example((2,), (1,), 0, 0)] * 5 + [Example((2,), (1,), 0, 1)] * 2
    score = popularity_baseline(train, 3)([None])[0]
    assert score[0] > score[1]
    rep = evaluate_scorer(popularity_baseline(train, 3), [Example((0,), (0,), 1, 2)], ic)
    assert rep.mrr[10] == 1.0


def test_metric_invariants_and_mean_agreement():
    rng = np.random.default_rng(1)
    ranks = rng.integers(1, 60, size=5000)
    rep = report_from_ranks(ranks, 0)
    for k in (10, 20):
        assert rep.mrr[k] <= rep.precision[k]
        per = np.where(ranks <= k, 1.0 / ranks, 0.0)
        assert abs(rep.mrr[k] - per.mean()) <= 1e-12
    assert rep.precision[10] <= rep.precision[20] and rep.mrr[10] <= rep.mrr[20]


def test_empty_split_is_fatal():
    with pytest.raises(ValueError):
        evaluate_scorer(lambda c: None, [], np.zeros(1, int))


def test_oracle_catches_wrong_ranks(monkeypatch):
    ic, train, test = toy_split()
    monkeypatch.setattr(ev, "batch_ranks", lambda s, m, l: np.ones(len(l), dtype=int))
    with pytest.raises(AssertionError, match="oracle"):
        evaluate_scorer(popularity_baseline(train, 6), test, ic, oracle_fraction=1.0)


def test_model_evaluation_is_repeatable_and_worker_independent(small_corpus):
    cfg = ModelConfig(dim=8, layers=1)
    ic = small_corpus.vocab.item_category_array()
    params = init_params(0, small_corpus.vocab.n_items, small_corpus.vocab.n_categories, cfg)
    a = evaluate(params, small_corpus.valid, cfg, ic, batch_size=64)
    b = evaluate(params, small_corpus.valid, cfg, ic, batch_size=64, workers=3)
    assert a == b
    assert a.table("valid") == b.table("valid")


def test_record_format():
    rep = report_from_ranks(np.array([1, 2, 50]), 1)
    lines = rep.as_records("test")
    assert lines[0] == "test\t10\tP\t0.666667"
    assert len(lines) == 4
