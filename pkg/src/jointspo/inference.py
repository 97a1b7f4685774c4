"""From model outputs to final triplets: thresholding, schema filtering, entity completion."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import SchemaSet, Triplet, make_triplet
from .tags import EntitySpan, TagInventory, decode_tags


@dataclass(frozen=True)
class TripletCandidate:
    triplet: Triplet
    pair_prob: float
    global_prob: float = 0.5
    pair_dist: tuple[float, ...] = ()    # all relation probabilities at the anchor pair
    global_dist: tuple[float, ...] = ()  # sentence-level predicate probabilities
    source: str = ""

    @property
    def subject_type(self) -> str:
        return self.triplet.subject_type

    @property
    def object_type(self) -> str:
        return self.triplet.object_type

    @property
    def key(self) -> tuple[str, str, str]:
        return self.triplet.key


def anchor(span: EntitySpan) -> int:
    return span.end - 1


def decode_triplets(tags: Sequence[int], probs: np.ndarray, threshold: float, text: str,
                    inv: TagInventory, predicates: Sequence[str],
                    global_probs: np.ndarray | None = None, source: str = "") -> list[TripletCandidate]:
    """Emit a candidate for every ordered span pair and relation at or above threshold.

    ``probs`` is the K x K x R sigmoid array (subject anchor, object anchor, relation).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    spans = decode_tags(tags, inv)
    probs = np.asarray(probs)
    out = []
    for s in spans:
        for o in spans:
            if s == o:
                continue
            dist = probs[anchor(s), anchor(o)]
            for r in np.flatnonzero(dist >= threshold):
                g = float(global_probs[r]) if global_probs is not None else 0.5
                out.append(TripletCandidate(
                    make_triplet(text, s, predicates[r], o), float(dist[r]), g,
                    tuple(float(x) for x in dist),
                    tuple(float(x) for x in global_probs) if global_probs is not None else (),
                    source))
    out.sort(key=lambda c: -c.pair_prob)
    return out


def schema_filter(cands: Iterable[TripletCandidate], schemas: SchemaSet) -> list[TripletCandidate]:
    return [c for c in cands if schemas.allows(c.subject_type, c.triplet.predicate, c.object_type)]


# --- entity completion ------------------------------------------------------

DEFAULT_RULES = "rules.json"


@lru_cache(maxsize=8)
def load_rules(path: str | None = None) -> dict:
    if path is None:
        text = resources.files("jointspo").joinpath(DEFAULT_RULES).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    rules = json.loads(text)
    if rules.get("version") != 1:
        raise ValueError(f"unsupported rules version {rules.get('version')}")
    return rules


def complete_span(text: str, span: EntitySpan, rules: dict | None = None) -> EntitySpan:
    rules = rules or load_rules()
    a, b = span.start, span.end
    for m in re.finditer(rules["book_title"]["pattern"], text):
        inner = (m.start(1), m.end(1))
        if m.start() <= a and b <= m.end() and (a, b) != inner and inner[1] > inner[0]:
            return EntitySpan(*inner, span.type)
    if span.type in rules["date"]["types"]:
        for m in re.finditer(rules["date"]["pattern"], text):
            if m.start() <= a and b <= m.end() and (a, b) != m.span():
                return EntitySpan(m.start(), m.end(), span.type)
    return span


def complete_entities(cands: Iterable[TripletCandidate], text: str,
                      rules: dict | None = None) -> list[TripletCandidate]:
    """Expand partial book titles and dates; merge candidates that become identical."""
    rules = rules or load_rules()
    best: dict[tuple, TripletCandidate] = {}
    order = []
    for c in cands:
        t = c.triplet
        s = complete_span(text, t.subject, rules)
        o = complete_span(text, t.object, rules)
        if (s, o) != (t.subject, t.object):
            c = replace(c, triplet=make_triplet(text, s, t.predicate, o))
        k = (c.triplet.subject_span, c.triplet.predicate, c.triplet.object_span)
        if k not in best:
            order.append(k)
            best[k] = c
        elif c.pair_prob > best[k].pair_prob:
            best[k] = c
    return [best[k] for k in order]


def postprocess(cands: Iterable[TripletCandidate], text: str, schemas: SchemaSet,
                rules: dict | None = None) -> list[TripletCandidate]:
    return complete_entities(schema_filter(cands, schemas), text, rules)
