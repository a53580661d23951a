from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demoner.corpus import BIOES, Dataset, Sentence, build_entity_index
from demoner.demonstration import DemoBuilder, enumerate_candidates
from demoner.training import (
    TEST,
    ModelSpec,
    RunResult,
    TrainConfig,
    adapt,
    carve_dev,
    evaluate,
    grid_search,
    run_ablation_matrix,
    run_cell,
    span_prf,
    train,
)

FAST = TrainConfig(max_epochs=3, early_stop_patience=2, seed=0)
SMALL = dict(d_model=16, n_heads=2, n_layers=1, max_len=96)


def naive_prf(gold, pred):
    tp = sum(len(set(g) & set(p)) for g, p in zip(gold, pred))
    n_pred = sum(len(set(p)) for p in pred)
    n_gold = sum(len(set(g)) for g in gold)
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_gold if n_gold else 0.0
    return prec, rec, (2 * prec * rec / (prec + rec) if prec + rec else 0.0)


span = st.tuples(st.sampled_from(["PER", "LOC"]), st.integers(0, 6), st.integers(0, 3)).map(lambda t: (t[0], t[1], t[1] + t[2]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sets(span, max_size=4), st.sets(span, max_size=4)), min_size=1, max_size=5))
def test_span_prf_matches_naive(pairs):
    gold, pred = [g for g, _ in pairs], [p for _, p in pairs]
    assert span_prf(gold, pred) == naive_prf(gold, pred)


def test_span_prf_examples():
    assert span_prf([{("PER", 0, 0)}], [{("PER", 0, 0)}]) == (1.0, 1.0, 1.0)
    assert span_prf([{("PER", 0, 0)}], [set()]) == (0.0, 0.0, 0.0)
    assert span_prf([{("PER", 0, 1)}], [{("PER", 0, 0)}])[2] == 0.0


def test_config_validation_and_lr():
    assert TrainConfig().learning_rate == pytest.approx(1e-3)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=3, early_stop_patience=5)


def test_run_result_json_round_trip():
    r = RunResult(0.5, 0.25, 1 / 3, dataset="d", seed=2, extra={"a": 1}, wall_clock=3.2)
    back = RunResult.from_dict(json.loads(r.to_json()))
    assert back == r
    assert "wall_clock" not in json.loads(r.to_json(include_wall_clock=False))


@pytest.fixture(scope="module")
def setup(tiny_splits):
    train_set = tiny_splits["train"].subset(range(12))
    dev_set = tiny_splits["dev"].subset(range(6))
    factory = ModelSpec.for_data(train_set, encoder=SMALL)
    return train_set, dev_set, tiny_splits["test"], factory


def test_training_reduces_loss(setup):
    train_set, dev_set, _, factory = setup
    model = factory(0)
    cfg = dataclasses.replace(FAST, max_epochs=8, early_stop_patience=8, word_dropout=0.0)
    from demoner.training import encode_split

    items = encode_split(model, train_set, None, 0, False)
    before = sum(model.loss_and_grads(it.ids, it.boundary, it.tags)[0] for it in items)
    out = train(model, train_set, dev_set, None, cfg)
    after = sum(out.model.loss_and_grads(it.ids, it.boundary, it.tags)[0] for it in items)
    assert after < before
    assert len(out.history) == out.epochs_run and out.best_dev_f1 == max(out.history)


def test_early_stopping_patience(setup):
    train_set, dev_set, _, factory = setup
    out = train(factory(0), train_set, dev_set, None, TrainConfig(max_epochs=30, early_stop_patience=0))
    assert out.epochs_run == 1


def test_same_seed_same_result(setup):
    train_set, dev_set, test_set, factory = setup
    b = DemoBuilder("popular", "context", train_set)
    rows = [run_cell(factory, train_set, dev_set, test_set, b, FAST, dataset="t").to_json(False) for _ in range(2)]
    assert rows[0] == rows[1]


def test_nonfinite_loss_raises(setup):
    train_set, dev_set, _, factory = setup
    model = factory(0)
    model.crf.transitions[:] = np.nan
    with pytest.raises(FloatingPointError, match="learning rate"):
        train(model, train_set, dev_set, None, FAST)


def test_empty_dev_rejected(setup):
    train_set, _, _, factory = setup
    with pytest.raises(ValueError):
        train(factory(0), train_set, Dataset((), train_set.label_set), None, FAST)


def test_ablation_has_four_cells(setup):
    train_set, dev_set, test_set, factory = setup
    b = DemoBuilder("popular", "no_context", train_set)
    rows = run_ablation_matrix(factory, train_set, dev_set, test_set, b, FAST)
    assert [(r.extra["use_dem_train"], r.extra["use_dem_infer"]) for r in rows] == [
        (False, False), (False, True), (True, False), (True, True),
    ]
    plain = run_cell(factory, train_set, dev_set, test_set, None, dataclasses.replace(FAST, use_dem_train=False, use_dem_infer=False))
    assert rows[0].f1 == plain.f1


def test_evaluate_perfect_model_scores_one():
    s = Sentence(("a", "b"), ("S-PER", "O"), BIOES)
    d = Dataset((s,), ("PER",))

    class Oracle:
        from demoner.crf import TagSet

        tagset = TagSet(("PER",))

        def encode_input(self, tokens, demo_tokens=()):
            return np.zeros(len(tokens), dtype=int), len(tokens)

        def predict_ids(self, ids, boundary):
            return self.tagset.encode(["S-PER", "O"])

    r = evaluate(Oracle(), d, None, False, TEST)
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)


def test_grid_search_table_and_argmax():
    from demoner.corpus import convert_scheme
    from demoner.synth import SynthSpec, generate

    splits = generate(SynthSpec(labels=("PER", "LOC"), gazetteer_size=4, train_size=12, dev_size=6, test_size=2, seed=1))
    train_set, dev_set = convert_scheme(splits["train"], BIOES), convert_scheme(splits["dev"], BIOES)
    factory = ModelSpec.for_data(train_set, encoder=SMALL)
    cands = list(enumerate_candidates(build_entity_index(train_set), 2, train_set.label_set))
    found = grid_search(cands, "no_context", factory, train_set, dev_set, FAST)
    assert len(found.table) == len(cands) == 4
    best_row = max(found.table, key=lambda r: (r["dev_f1"], -r["index"]))
    assert found.best == cands[best_row["index"]] and found.best_f1 == best_row["dev_f1"]
    single = grid_search(cands[:1], "no_context", factory, train_set, dev_set, FAST)
    assert single.best == cands[0]
    with pytest.raises(ValueError):
        grid_search([], "no_context", factory, train_set, dev_set, FAST)


def test_grid_search_ties_go_to_earliest(setup, monkeypatch):
    import demoner.training as tr

    train_set, dev_set, _, factory = setup
    cands = list(enumerate_candidates(build_entity_index(train_set), 2, train_set.label_set))
    monkeypatch.setattr(tr, "_grid_job", lambda args: (args[0], 0.5))
    assert grid_search(cands, "no_context", factory, train_set, dev_set, FAST).best == cands[0]


def test_adapt_transfers_then_tunes(setup):
    train_set, dev_set, _, factory = setup
    source = factory(5)
    out = adapt(source, train_set, dev_set, None, dataclasses.replace(FAST, use_dem_train=False, use_dem_infer=False))
    assert np.isfinite(out.best_dev_f1)
    assert not np.array_equal(out.model.encoder["tok_emb"], source.encoder["tok_emb"])


def test_carve_dev():
    d = Dataset(tuple(Sentence((f"w{i}",), ("O",)) for i in range(12)), ())
    tr, dv = carve_dev(d)
    assert [s.tokens[0] for s in dv] == ["w4", "w9"] and len(tr) == 10
    small = d.subset(range(5))
    assert carve_dev(small) == (small, small)


def test_demonstration_states_never_reach_the_crf():
    from conftest import tiny_model

    model = tiny_model(0)
    ids, boundary = model.encode_input(["t1", "t2", "t3"], ["t4", "is", "PER", "."])
    em, hidden, _ = model.emissions(ids, boundary)
    masked = hidden.states.copy()
    masked[boundary:] = 0.0
    again = masked[:boundary] @ model.crf.emission_weight + model.crf.emission_bias
    assert np.array_equal(em, again)


def test_early_stopping_returns_best_snapshot(setup):
    train_set, dev_set, _, factory = setup
    from demoner.training import encode_split, score_items

    out = train(factory(1), train_set, dev_set, None, TrainConfig(max_epochs=6, early_stop_patience=6))
    dev_items = encode_split(out.model, dev_set, None, 1, False)
    assert score_items(out.model, dev_items)[2] == out.best_dev_f1 == out.history[out.best_epoch - 1]
