import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointspo.data import Schema, SchemaSet, Triplet, make_triplet
from jointspo.inference import (TripletCandidate, complete_entities, complete_span, decode_triplets, load_rules,
                                schema_filter)
from jointspo.model import ner_tags, pair_labels
from jointspo.tags import EntitySpan, TagInventory, encode_spans

INV = TagInventory(["Person", "Place"])
PREDS = ("birthplace", "father", "wife")
SCHEMAS = SchemaSet([Schema("Person", "wife", "Person"), Schema("Person", "birthplace", "Place"),
                     Schema("Person", "father", "Person")])


def test_no_spans_no_candidates():
    assert decode_triplets([0, 0, 0], np.ones((3, 3, 3)) * 0.9, 0.5, "abc", INV, PREDS) == []


def test_below_threshold():
    tags = encode_spans([EntitySpan(0, 1, "Person"), EntitySpan(2, 3, "Person")], 3, INV)
    assert decode_triplets(tags, np.full((3, 3, 3), 0.4), 0.5, "abc", INV, PREDS) == []


def test_shared_subject_two_triplets():
    text = "AA的BB和CC"
    A, B, C = EntitySpan(0, 2, "Person"), EntitySpan(3, 5, "Person"), EntitySpan(6, 8, "Place")
    tags = encode_spans([A, B, C], len(text), INV)
    probs = np.zeros((8, 8, 3))
    probs[1, 4, 2] = 0.9    # wife(A, B) at span-final anchors
    probs[1, 7, 0] = 0.8    # birthplace(A, C)
    cands = decode_triplets(tags, probs, 0.5, text, INV, PREDS)
    assert [c.key for c in cands] == [("AA", "wife", "BB"), ("AA", "birthplace", "CC")]
    assert [c.pair_prob for c in cands] == [0.9, 0.8]
    assert cands[0].subject_type == "Person" and cands[1].object_type == "Place"


def test_threshold_range():
    with pytest.raises(ValueError):
        decode_triplets([0], np.zeros((1, 1, 3)), 1.0, "a", INV, PREDS)


@settings(max_examples=50)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_threshold_monotone(seed, lo, gap):
    rng = np.random.default_rng(seed)
    K = 8
    tags = rng.integers(0, INV.N, size=K)
    probs = rng.random((K, K, 3))
    hi = min(lo + gap, 0.99)
    n_lo = len(decode_triplets(tags, probs, lo, "x" * K, INV, PREDS))
    n_hi = len(decode_triplets(tags, probs, hi, "x" * K, INV, PREDS))
    assert n_hi <= n_lo


def cand(text, s, p, o, prob=0.9):
    return TripletCandidate(make_triplet(text, s, p, o), prob)


def test_schema_filter():
    text = "甲乙"
    ok = cand(text, EntitySpan(0, 1, "Person"), "wife", EntitySpan(1, 2, "Person"))
    bad = cand(text, EntitySpan(0, 1, "Company"), "wife", EntitySpan(1, 2, "Person"))
    assert schema_filter([ok, bad], SCHEMAS) == [ok]
    assert schema_filter([ok, bad], SchemaSet()) == []
    assert schema_filter(schema_filter([ok, bad], SCHEMAS), SCHEMAS) == [ok]


def test_complete_book_title():
    text = "《abc》"
    c = cand(text, EntitySpan(1, 3, "Work"), "singer", EntitySpan(0, 1, "Person"))
    [out] = complete_entities([c], text)
    assert out.triplet.subject_text == "abc"


def test_complete_untouched_outside_marks():
    text = "ab的c"
    c = cand(text, EntitySpan(0, 2, "Person"), "wife", EntitySpan(3, 4, "Person"))
    assert complete_entities([c], text) == [c]


def test_complete_date():
    text = "X生于2019年5月"
    c = cand(text, EntitySpan(0, 1, "Person"), "birth_date", EntitySpan(3, 8, "Date"))
    assert c.triplet.object_text == "2019年"
    [out] = complete_entities([c], text)
    assert out.triplet.object_text == "2019年5月"
    assert complete_entities([out], text) == [out]


def test_completion_merges_duplicates():
    text = "X生于2019年5月"
    s = EntitySpan(0, 1, "Person")
    a = cand(text, s, "birth_date", EntitySpan(3, 8, "Date"), 0.7)
    b = cand(text, s, "birth_date", EntitySpan(3, 10, "Date"), 0.8)
    [out] = complete_entities([a, b], text)
    assert out.pair_prob == 0.8


@pytest.mark.parametrize("case", load_rules()["cases"], ids=lambda c: f"{c['text']}-{c['span']}")
def test_rules_file_cases(case):
    span = EntitySpan(*case["span"], case["type"])
    out = complete_span(case["text"], span)
    assert [out.start, out.end] == case["expected"]
    assert complete_span(case["text"], out) == out


def test_oracle_scores_recover_gold(small_corpus):
    schemas, train, _, _ = small_corpus
    inv = TagInventory(schemas.entity_types)
    for ex in train:
        if any(a.overlaps(b) for a in ex.gold_spans for b in ex.gold_spans if a != b):
            continue
        K = len(ex.text)
        probs = np.zeros((K, K, schemas.R))
        for i, j, r in pair_labels(ex, schemas):
            probs[i, j, r] = 1.0
        cands = decode_triplets(ner_tags(ex, inv), probs, 0.5, ex.text, inv, schemas.predicates)
        assert {c.triplet for c in cands} == set(ex.gold_triplets)
