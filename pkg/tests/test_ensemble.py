import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointspo import ensemble as ens
from jointspo.data import Example, make_triplet
from jointspo.inference import TripletCandidate
from jointspo.tags import EntitySpan
from jointspo.training import Prediction, evaluate

PREDS = ("birthplace", "wife")
TEXT = "王五的妻子是李四，王五出生于北京"
W, L, B = EntitySpan(0, 2, "Person"), EntitySpan(6, 8, "Person"), EntitySpan(14, 16, "Place")
WIFE = make_triplet(TEXT, W, "wife", L)
BORN = make_triplet(TEXT, W, "birthplace", B)
WRONG = make_triplet(TEXT, L, "birthplace", B)


def cand(t, p, source="a"):
    dist = tuple(p if q == t.predicate else 0.1 for q in PREDS)
    return TripletCandidate(t, p, 0.7, dist, (0.6, 0.4), source)


def features(c, ctx, index=None, sources=("a", "b")):
    index = index or ens.TrainsetIndex([])
    names = ens.build_manifest(PREDS, sources)
    x = ens.extract_features(c, ctx, index, ens.Segmenter(index.entities), PREDS, sources)
    return dict(zip(names, x)), x, names


def test_manifest_length_and_hash():
    names = ens.build_manifest(PREDS, ("a", "b"))
    assert len(names) == len(set(names))
    ctx = ens.SentenceContext(TEXT, {"a": [cand(WIFE, 0.9)]})
    for c in ctx.candidates["a"]:
        assert len(features(c, ctx)[1]) == len(names)
    assert ens.manifest_hash(names) == ens.manifest_hash(list(names))
    assert ens.manifest_hash(names) != ens.manifest_hash(names[::-1])


def test_in_trainset_flag():
    index = ens.TrainsetIndex([Example(TEXT, (WIFE,))])
    ctx = ens.SentenceContext(TEXT, {"a": [cand(WIFE, 0.9), cand(WRONG, 0.6)]})
    f_wife = features(ctx.candidates["a"][0], ctx, index)[0]
    f_wrong = features(ctx.candidates["a"][1], ctx, index)[0]
    assert f_wife["in_trainset"] == 1 and f_wife["pair_in_trainset"] == 1
    assert f_wrong["in_trainset"] == 0 and f_wrong["subject_in_trainset"] == 1
    assert f_wrong["object_in_trainset"] == 0


def test_counts_hand_counted():
    ctx = ens.SentenceContext(TEXT, {"a": [cand(WIFE, 0.9), cand(BORN, 0.8)]}, {"a": [W, L, B]})
    f = features(ctx.candidates["a"][0], ctx)[0]
    assert (f["n_pred_entities"], f["n_pred_triplets"], f["n_pred_relations"]) == (3, 2, 2)


def test_votes_and_source_one_hot():
    ctx = ens.SentenceContext(TEXT, {"a": [cand(WIFE, 0.9)], "b": [cand(WIFE, 0.5, "b")]})
    f = features(ctx.candidates["b"][0], ctx)[0]
    assert f["votes"] == 1.0 and f["vote_mean_prob"] == pytest.approx(0.7) and f["vote_max_prob"] == 0.9
    assert f["source=b"] == 1 and f["source=a"] == 0
    assert f["pair_bucket=5"] == 1 and f["predicate=wife"] == 1


def test_feature_determinism():
    ctx = ens.SentenceContext(TEXT, {"a": [cand(WIFE, 0.9), cand(BORN, 0.3)]})
    a = features(ctx.candidates["a"][1], ctx)[1]
    b = features(ctx.candidates["a"][1], ctx)[1]
    assert np.array_equal(a, b)


def test_segmenter_boundaries():
    seg = ens.Segmenter(["王五", "北京"])
    cuts = seg.boundaries("王五在北京")
    assert {0, 2, 3, 5} <= cuts
    assert 1 not in cuts and 4 not in cuts


def test_contexts_from_predictions_checks_alignment():
    a = [Prediction(TEXT, [cand(WIFE, 0.9, "")], [W, L])]
    ctxs = ens.contexts_from_predictions({"x": a, "y": a})
    assert [c.source for c in ctxs[0].candidates["y"]] == ["y"]
    assert ctxs[0].entities["x"] == [W, L]
    with pytest.raises(ens.RerankerError):
        ens.contexts_from_predictions({"x": a, "y": a + a})
    with pytest.raises(ens.RerankerError):
        ens.contexts_from_predictions({"x": a, "y": [Prediction("别的句子", [])]})


def _toy_table(n=400, seed=0, separable=True):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 3))
    if separable:
        X[:, 0] = y * 2.0 - 1.0 + 0.1 * rng.normal(size=n)
    return ens.CandidateTable(["f0", "f1", "f2"], X, y, np.arange(n) // 2, [None] * n)


@pytest.mark.parametrize("backend", ["gbdt", "logreg"])
def test_separable_toy(backend):
    table = _toy_table()
    r = ens.train_reranker(table, backend)
    assert np.mean((r.score(table.X) >= 0.5) == table.y) == 1.0


def test_shuffled_labels_auc_near_half():
    table = _toy_table(n=4000, separable=True)
    shuffled = np.random.default_rng(1).permutation(table.y)
    cv = ens.cross_validate(table, "logreg", folds=5, labels=shuffled)
    assert abs(cv.auc - 0.5) <= 0.05
    assert len(cv.fold_curves) == 5


def test_reranker_deterministic():
    table = _toy_table(separable=False)
    a = ens.train_reranker(table, "gbdt", seed=3).score(table.X)
    b = ens.train_reranker(table, "gbdt", seed=3).score(table.X)
    assert np.array_equal(a, b)


def test_single_class_rejected():
    table = _toy_table()
    table.y[:] = 1
    with pytest.raises(ens.RerankerError):
        ens.train_reranker(table)
    with pytest.raises(ens.RerankerError):
        ens.cross_validate(table)


def test_grouped_folds_keep_sentences_together():
    table = _toy_table(n=200)
    cv = ens.cross_validate(table, "logreg", folds=4)
    assert cv.oof_scores.shape == (200,)


def _pooled(sources=("a", "b")):
    ctx = ens.SentenceContext(TEXT, {s: [cand(WIFE, 0.9, s), cand(WRONG, 0.4, s)] for s in sources})
    table = ens.build_table([ctx], ens.TrainsetIndex([]), ens.Segmenter([]), PREDS, list(sources),
                            [Example(TEXT, (WIFE, BORN))])
    return ctx, table


def test_build_table_labels():
    _, table = _pooled()
    assert table.X.shape == (4, len(table.manifest))
    assert table.y.tolist() == [1, 0, 1, 0]
    assert table.sentence.tolist() == [0, 0, 0, 0]


def test_k1_threshold0_is_identity():
    ctx, table = _pooled(("a",))
    kept = ens.rerank(table, np.random.default_rng(0).random(len(table.candidates)), 0.0, 1)
    assert {t.key for t, _ in kept[0]} == {c.key for c in ctx.candidates["a"]}


def test_duplicates_appear_once_with_max_score():
    _, table = _pooled()
    kept = ens.rerank(table, np.array([0.6, 0.2, 0.8, 0.1]), 0.5, 1)
    assert [(t.key, s) for t, s in kept[0]] == [(WIFE.key, 0.8)]


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.floats(0, 1), st.floats(0, 1))
def test_subset_and_monotone(scores, t1, t2):
    ctx, table = _pooled()
    union = {c.key for cs in ctx.candidates.values() for c in cs}
    lo, hi = sorted((t1, t2))
    a = ens.rerank(table, np.array(scores), lo, 1)[0]
    b = ens.rerank(table, np.array(scores), hi, 1)[0]
    assert {t.key for t, _ in a} <= union
    assert {t.key for t, _ in b} <= {t.key for t, _ in a}


def test_save_load_and_manifest_mismatch(tmp_path):
    _, table = _pooled()
    table.y[:] = [1, 0, 1, 0]
    r = ens.train_reranker(table, "logreg")
    ens.save_reranker(r, tmp_path / "r.pkl")
    back = ens.load_reranker(tmp_path / "r.pkl", table.manifest)
    assert np.array_equal(back.score(table.X), r.score(table.X))
    with pytest.raises(ens.RerankerError, match="hash mismatch"):
        ens.load_reranker(tmp_path / "r.pkl", table.manifest + ["extra"])
    with pytest.raises(ens.RerankerError, match="feature width"):
        r.score(table.X[:, :-1])


def test_feature_dump(tmp_path):
    _, table = _pooled()
    ens.save_feature_dump(table, tmp_path / "f.jsonl")
    lines = (tmp_path / "f.jsonl").read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    assert header["manifest_hash"] == ens.manifest_hash(table.manifest)
    rows = [json.loads(x) for x in lines[1:]]
    assert len(rows) == 4 and all(len(r["x"]) == len(header["manifest"]) for r in rows)


def test_rerank_examples_evaluate():
    _, table = _pooled()
    kept = ens.rerank(table, np.array([0.9, 0.1, 0.9, 0.1]), 0.5, 1)
    r = evaluate(ens.rerank_examples([TEXT], kept), [Example(TEXT, (WIFE, BORN))])
    assert (r.predicted, r.correct) == (1, 1)
