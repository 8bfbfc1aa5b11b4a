import math
from dataclasses import replace

import numpy as np
import pytest

from iagnn import autodiff as ad
from iagnn import trainer as tr
from iagnn.evaluate import MetricsReport, evaluate
from iagnn.model import ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from iagnn.trainer import AdamState, NumericFailure, TrainConfig, adam_step, grid_search, train, train_from_scratch


def single(value, name="w"):
    return ModelParams([(name, ad.param(np.array([[value]]), name))])


def test_first_adam_step():
    p = single(0.0)
    p["w"].grad = np.array([[1.0]])
    adam_step(p, AdamState.for_params(p), lr=0.1)
    assert p["w"].value[0, 0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_zero_gradient_leaves_params():
    cfg = ModelConfig(dim=4, layers=1)
    p = init_params(0, 6, 2, cfg)
    before = {k: t.value.copy() for k, t in p.items()}
    for t in p.values():
        t.grad = np.zeros_like(t.value)
    adam_step(p, AdamState.for_params(p), lr=0.1)
    for k, t in p.items():
        assert np.array_equal(t.value, before[k])


def test_quadratic_bowl_converges():
    p = single(1.0)
    state = AdamState.for_params(p)
    for _ in range(500):
        p.zero_grad()
        ad.backward(ad.sum(p["w"] * p["w"]))
        adam_step(p, state, lr=0.05)
    assert abs(p["w"].value[0, 0]) < 1e-3


def test_lazy_table_moments_match_dense_adam():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(4, 3)) for _ in range(6)]
    for t, g in enumerate(grads):
        g[1] = 0.0 if t in (1, 2, 4) else g[1]  # row 1 skipped on some steps
        g[3] = 0.0  # row 3 never touched
    lazy = ModelParams([("item_table", ad.param(np.ones((4, 3)), "item_table"))])
    dense = ModelParams([("dense", ad.param(np.ones((4, 3)), "dense"))])
    s_lazy, s_dense = AdamState.for_params(lazy), AdamState.for_params(dense)
    for g in grads:
        lazy["item_table"].grad = g.copy()
        dense["dense"].grad = g.copy()
        adam_step(lazy, s_lazy, 0.01)
        adam_step(dense, s_dense, 0.01)
    # row 1 was touched on the final step, so its moments have caught up
    for rows in ([0, 2], [1]):
        np.testing.assert_allclose(s_lazy.m["item_table"][rows], s_dense.m["dense"][rows], rtol=1e-12)
        np.testing.assert_allclose(s_lazy.v["item_table"][rows], s_dense.v["dense"][rows], rtol=1e-12)
    assert np.array_equal(lazy["item_table"].value[3], np.ones(3))
    np.testing.assert_allclose(lazy["item_table"].value[[0, 2]], dense["dense"].value[[0, 2]], rtol=1e-12)


def test_nan_gradient_names_tensor():
    p = single(0.0, "gate.skip_item")
    p["gate.skip_item"].grad = np.array([[np.nan]])
    with pytest.raises(NumericFailure, match="gate.skip_item"):
        adam_step(p, AdamState.for_params(p), lr=0.1)


# training loop ------------------------------------------------------------------------


def quick(**kw):
    base = TrainConfig(batch_size=64, max_epochs=3, model=ModelConfig(dim=8, layers=1))
    return replace(base, **kw)


def corpus_args(c):
    return c.train, c.valid, c.vocab.n_items, c.vocab.n_categories, c.vocab.item_category_array()


def test_early_stop_after_patience(small_corpus, monkeypatch):
    vals = iter([0.5, 0.4, 0.3, 0.2, 0.1, 0.05])

    def fake_eval(*a, **k):
        v = next(vals)
        return MetricsReport({10: v, 20: v}, {10: v, 20: v}, 1, 0)

    monkeypatch.setattr(tr, "evaluate_scorer", fake_eval)
    res = train_from_scratch(*corpus_args(small_corpus), quick(max_epochs=10, patience=3))
    assert len(res.history) == 4 and res.best_epoch == 1


def test_lr_step_decay(small_corpus):
    res = train_from_scratch(*corpus_args(small_corpus), quick(learning_rate=0.01, lr_decay_step_epochs=2, patience=9))
    assert [r.lr for r in res.history] == pytest.approx([0.01, 0.01, 0.001])


def test_training_is_deterministic(small_corpus):
    a = train_from_scratch(*corpus_args(small_corpus), quick(max_epochs=2))
    b = train_from_scratch(*corpus_args(small_corpus), quick(max_epochs=2))
    assert a.history_text() == b.history_text()
    assert all(a.params[k].value.tobytes() == b.params[k].value.tobytes() for k in a.params)


def test_history_format(small_corpus):
    res = train_from_scratch(*corpus_args(small_corpus), quick(max_epochs=1))
    lines = res.history_text().splitlines()
    assert lines[0].split("\t") == ["epoch", "lr", "train_loss", "val_P@10", "val_P@20", "val_mrr@10", "val_mrr@20"]
    assert len(lines[1].split("\t")) == 7


def test_empty_training_set_is_fatal(small_corpus):
    with pytest.raises(ValueError, match="empty"):
        train([], small_corpus.valid, init_params(0, 3, 1, ModelConfig(dim=4)), quick(), np.zeros(3, int))


def test_memorisation_loss_decreases(small_corpus):
    exs = small_corpus.train[:64]
    cfg = quick(learning_rate=0.01, max_epochs=5, patience=10, batch_size=16)
    res = train_from_scratch(exs, exs, *corpus_args(small_corpus)[2:], cfg)
    losses = [r.train_loss for r in res.history]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_checkpoint_round_trip_preserves_metrics(small_corpus, tmp_path):
    cfg = quick(max_epochs=1)
    res = train_from_scratch(*corpus_args(small_corpus), cfg)
    save_checkpoint(tmp_path / "m.ckpt", res.params, cfg.model)
    params, mcfg, _ = load_checkpoint(tmp_path / "m.ckpt")
    ic = small_corpus.vocab.item_category_array()
    assert evaluate(params, small_corpus.valid, mcfg, ic) == res.best_val


def test_initial_loss_near_log_candidate_size(small_corpus):
    ic = small_corpus.vocab.item_category_array()
    sizes = np.bincount(ic)
    expect = math.log(np.mean([sizes[ex.target_category] for ex in small_corpus.train]))
    res = train_from_scratch(*corpus_args(small_corpus), quick(max_epochs=1, model=ModelConfig(dim=16, layers=2)))
    assert abs(res.first_batch_loss - expect) / expect < 0.2


# grid -------------------------------------------------------------------------------------


def test_degenerate_grid_equals_direct_run(small_corpus):
    base = quick(max_epochs=2)
    rows = grid_search(*corpus_args(small_corpus), base, learning_rates=(0.001,), decay_steps=(3,), layers=(1,))
    direct = train_from_scratch(*corpus_args(small_corpus), base)
    assert len(rows) == 1
    assert rows[0].result.history_text() == direct.history_text()


def test_two_learning_rates_give_distinct_rows(small_corpus):
    rows = grid_search(*corpus_args(small_corpus), quick(max_epochs=1), learning_rates=(0.001, 0.1))
    assert sorted(r.learning_rate for r in rows) == [0.001, 0.1]
    assert rows[0].result.history_text() != rows[1].result.history_text()
    assert rows[0].val.mrr[20] >= rows[1].val.mrr[20]
    table = tr.grid_table(rows).splitlines()
    assert len(table) == 3 and table[0].startswith("lr\t")
    assert tr.depth_curve(rows) == {1: rows[0].val.mrr[20]}


def test_grid_axes_default_to_base_config(small_corpus):
    base = quick(max_epochs=1, learning_rate=0.01, lr_decay_step_epochs=2)
    (row,) = grid_search(*corpus_args(small_corpus), base)
    assert (row.learning_rate, row.lr_decay_step_epochs, row.layers) == (0.01, 2, 1)
