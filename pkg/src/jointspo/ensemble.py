"""Triplet-level reranking over candidates pooled from several model variants.

Every candidate becomes one sample; a binary classifier trained on dev
predictions decides which pooled candidates survive.
"""
from __future__ import annotations

import hashlib
import json
import math
import pickle
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.ensemble import HistGradientBoostingClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import GroupKFold

from .data import Example, Triplet, normalize_entity
from .inference import TripletCandidate
from .tags import EntitySpan

RERANKER_FORMAT = "jointspo-reranker"
MANIFEST_VERSION = 1
N_BUCKETS = 10


class RerankerError(ValueError):
    pass


def _key(t: Triplet) -> tuple[str, str, str]:
    return normalize_entity(t.subject_text), t.predicate, normalize_entity(t.object_text)


# --- context objects -------------------------------------------------------

class TrainsetIndex:
    def __init__(self, examples: Iterable[Example]):
        self.triplets: set[tuple[str, str, str]] = set()
        self.entities: set[str] = set()
        self.pairs: set[tuple[str, str]] = set()
        for ex in examples:
            for t in ex.gold_triplets:
                s, p, o = _key(t)
                self.triplets.add((s, p, o))
                self.entities.update((s, o))
                self.pairs.add((s, o))


class Segmenter:
    """Greedy forward longest-match word segmentation over a fixed lexicon."""

    def __init__(self, words: Iterable[str]):
        self.words = {w for w in words if w}
        self.max_len = max((len(w) for w in self.words), default=1)

    def boundaries(self, text: str) -> set[int]:
        cuts, i = {0}, 0
        while i < len(text):
            step = 1
            for n in range(min(self.max_len, len(text) - i), 1, -1):
                if text[i:i + n] in self.words:
                    step = n
                    break
            i += step
            cuts.add(i)
        return cuts


@dataclass
class SentenceContext:
    text: str
    candidates: dict[str, list[TripletCandidate]]           # per source model
    entities: dict[str, list[EntitySpan]] = field(default_factory=dict)


def contexts_from_predictions(per_source: dict[str, Sequence]) -> list[SentenceContext]:
    """Zip aligned prediction lists (one per source model) into sentence contexts."""
    lists = list(per_source.values())
    if not lists:
        raise RerankerError("no prediction sources")
    n = len(lists[0])
    for src, preds in per_source.items():
        if len(preds) != n:
            raise RerankerError(f"source {src!r} has {len(preds)} sentences, expected {n}")
    out = []
    for i in range(n):
        texts = {per_source[s][i].text for s in per_source}
        if len(texts) != 1:
            raise RerankerError(f"sentence {i} text differs across sources")
        cands = {s: [replace(c, source=s) for c in per_source[s][i].candidates] for s in per_source}
        ents = {s: list(per_source[s][i].entities) for s in per_source if per_source[s][i].entities}
        out.append(SentenceContext(texts.pop(), cands, ents))
    return out


def build_manifest(predicates: Sequence[str], sources: Sequence[str]) -> list[str]:
    names = ["pair_prob", "pair_logit", "global_prob"]
    names += [f"pair_dist[{p}]" for p in predicates]
    names += [f"global_dist[{p}]" for p in predicates]
    names += ["in_trainset", "subject_in_trainset", "object_in_trainset", "pair_in_trainset"]
    names += ["n_pred_entities", "n_pred_triplets", "n_pred_relations"]
    names += ["boundary_subject", "boundary_object", "boundary_consistent"]
    names += ["subject_len", "object_len", "votes", "vote_mean_prob", "vote_max_prob"]
    names += [f"source={s}" for s in sources]
    names += [f"predicate={p}" for p in predicates]
    names += [f"pair_bucket={b}" for b in range(N_BUCKETS)]
    return names


def manifest_hash(manifest: Sequence[str]) -> str:
    blob = json.dumps({"version": MANIFEST_VERSION, "features": list(manifest)}, ensure_ascii=False)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _logit(p: float) -> float:
    p = min(max(p, 1e-6), 1 - 1e-6)
    return math.log(p / (1 - p))


def extract_features(cand: TripletCandidate, ctx: SentenceContext, index: TrainsetIndex,
                     segmenter: Segmenter, predicates: Sequence[str], sources: Sequence[str]) -> np.ndarray:
    t = cand.triplet
    key = _key(t)
    R = len(predicates)
    own = ctx.candidates.get(cand.source, [])
    if cand.source in ctx.entities:
        n_ent = len(ctx.entities[cand.source])
    else:
        n_ent = len({span for c in own for span in (c.triplet.subject, c.triplet.object)})
    votes = {}
    for src, cs in ctx.candidates.items():
        for c in cs:
            if _key(c.triplet) == key:
                votes[src] = max(votes.get(src, 0.0), c.pair_prob)
    cuts = segmenter.boundaries(ctx.text)
    b_s = t.subject_span[0] in cuts and t.subject_span[1] in cuts
    b_o = t.object_span[0] in cuts and t.object_span[1] in cuts

    x = [cand.pair_prob, _logit(cand.pair_prob), cand.global_prob]
    x += list(cand.pair_dist) if len(cand.pair_dist) == R else [0.0] * R
    x += list(cand.global_dist) if len(cand.global_dist) == R else [0.0] * R
    x += [key in index.triplets, key[0] in index.entities, key[2] in index.entities,
          (key[0], key[2]) in index.pairs]
    x += [n_ent, len(own), len({c.triplet.predicate for c in own})]
    x += [b_s, b_o, b_s and b_o]
    x += [len(key[0]), len(key[2]), len(votes) / max(1, len(sources)),
          float(np.mean(list(votes.values()))) if votes else 0.0, max(votes.values(), default=0.0)]
    x += [cand.source == s for s in sources]
    x += [t.predicate == p for p in predicates]
    bucket = min(int(cand.pair_prob * N_BUCKETS), N_BUCKETS - 1)
    x += [b == bucket for b in range(N_BUCKETS)]
    return np.asarray(x, dtype=np.float64)


# --- pooled candidate tables -------------------------------------------------

@dataclass
class CandidateTable:
    """Row-aligned features, labels and provenance for every pooled candidate."""
    manifest: list[str]
    X: np.ndarray
    y: np.ndarray | None
    sentence: np.ndarray
    candidates: list[TripletCandidate]


def build_table(contexts: Sequence[SentenceContext], index: TrainsetIndex, segmenter: Segmenter,
                predicates: Sequence[str], sources: Sequence[str],
                gold: Sequence[Example] | None = None) -> CandidateTable:
    manifest = build_manifest(predicates, sources)
    rows, labels, sent, cands = [], [], [], []
    for n, ctx in enumerate(contexts):
        gold_keys = {_key(t) for t in gold[n].gold_triplets} if gold is not None else set()
        for src in sources:
            for c in ctx.candidates.get(src, []):
                rows.append(extract_features(c, ctx, index, segmenter, predicates, sources))
                labels.append(_key(c.triplet) in gold_keys)
                sent.append(n)
                cands.append(c)
    X = np.vstack(rows) if rows else np.zeros((0, len(manifest)))
    return CandidateTable(manifest, X, np.asarray(labels, dtype=np.int64) if gold is not None else None,
                          np.asarray(sent, dtype=np.int64), cands)


def save_feature_dump(table: CandidateTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"manifest": table.manifest, "manifest_hash": manifest_hash(table.manifest)},
                           ensure_ascii=False) + "\n")
        for i, c in enumerate(table.candidates):
            rec = {"sentence": int(table.sentence[i]), "source": c.source, "triplet": list(_key(c.triplet)),
                   "x": [round(float(v), 6) for v in table.X[i]]}
            if table.y is not None:
                rec["label"] = int(table.y[i])
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


# --- reranker ------------------------------------------------------------------

def _make_classifier(backend: str, seed: int):
    if backend == "gbdt":
        return HistGradientBoostingClassifier(max_iter=200, learning_rate=0.1, max_leaf_nodes=15,
                                              l2_regularization=1.0, random_state=seed)
    if backend == "logreg":
        return LogisticRegression(C=1.0, max_iter=2000)
    raise RerankerError(f"unknown backend {backend!r}")


@dataclass
class Reranker:
    model: object
    manifest: list[str]
    threshold: float = 0.5
    backend: str = "gbdt"

    def score(self, X: np.ndarray) -> np.ndarray:
        if X.shape[1] != len(self.manifest):
            raise RerankerError(f"feature width {X.shape[1]} != manifest length {len(self.manifest)}")
        if len(X) == 0:
            return np.zeros(0)
        return self.model.predict_proba(X)[:, 1]


@dataclass
class CVReport:
    auc: float
    oof_scores: np.ndarray
    fold_curves: list[list[tuple[float, float, float]]]


def _check_labels(y: np.ndarray):
    if len(np.unique(y)) < 2:
        raise RerankerError("reranker training needs both correct and incorrect candidates")


def cross_validate(table: CandidateTable, backend: str = "gbdt", folds: int = 5, seed: int = 0,
                   labels: np.ndarray | None = None) -> CVReport:
    """Out-of-fold scores with folds grouped by sentence."""
    y = table.y if labels is None else labels
    _check_labels(y)
    oof = np.zeros(len(y))
    curves = []
    for tr, te in GroupKFold(n_splits=folds).split(table.X, y, groups=table.sentence):
        if len(np.unique(y[tr])) < 2:
            raise RerankerError("a cross-validation fold has a single class")
        clf = _make_classifier(backend, seed).fit(table.X[tr], y[tr])
        oof[te] = clf.predict_proba(table.X[te])[:, 1]
        curves.append(_binary_pr_curve(oof[te], y[te]))
    return CVReport(float(roc_auc_score(y, oof)), oof, curves)


def _binary_pr_curve(scores: np.ndarray, y: np.ndarray) -> list[tuple[float, float, float]]:
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], y[order]
    tp = np.cumsum(lab)
    n_pos = max(1, int(lab.sum()))
    pts = []
    for i in range(len(s)):
        if i == len(s) - 1 or s[i + 1] != s[i]:
            pts.append((float(s[i]), float(tp[i] / (i + 1)), float(tp[i] / n_pos)))
    return pts[::-1]


def train_reranker(table: CandidateTable, backend: str = "gbdt", threshold: float = 0.5,
                   seed: int = 0) -> Reranker:
    _check_labels(table.y)
    clf = _make_classifier(backend, seed).fit(table.X, table.y)
    return Reranker(clf, list(table.manifest), threshold, backend)


def rerank(table: CandidateTable, scores: np.ndarray, threshold: float,
           n_sentences: int) -> list[list[tuple[Triplet, float]]]:
    """Keep candidates scoring >= threshold; one entry per (sentence, triplet) with its max score."""
    best: list[dict] = [{} for _ in range(n_sentences)]
    for i, c in enumerate(table.candidates):
        if scores[i] < threshold:
            continue
        n = int(table.sentence[i])
        k = _key(c.triplet)
        if k not in best[n] or scores[i] > best[n][k][1]:
            best[n][k] = (c.triplet, float(scores[i]))
    return [sorted(d.values(), key=lambda ts: -ts[1]) for d in best]


def save_reranker(r: Reranker, path: str | Path) -> None:
    with open(path, "wb") as f:
        pickle.dump({"format": RERANKER_FORMAT, "manifest": r.manifest, "manifest_hash": manifest_hash(r.manifest),
                     "threshold": r.threshold, "backend": r.backend, "model": r.model}, f)


def load_reranker(path: str | Path, manifest: Sequence[str] | None = None) -> Reranker:
    with open(path, "rb") as f:
        blob = pickle.load(f)
    if not isinstance(blob, dict) or blob.get("format") != RERANKER_FORMAT:
        raise RerankerError(f"{path}: not a reranker file")
    if manifest_hash(blob["manifest"]) != blob["manifest_hash"]:
        raise RerankerError(f"{path}: stored manifest does not match its hash")
    if manifest is not None and manifest_hash(manifest) != blob["manifest_hash"]:
        raise RerankerError(f"{path}: feature manifest hash mismatch")
    return Reranker(blob["model"], blob["manifest"], blob["threshold"], blob["backend"])


def rerank_examples(texts: Sequence[str], kept: Sequence[Sequence[tuple[Triplet, float]]]) -> list[Example]:
    return [Example(t, tuple(tr for tr, _ in k)) for t, k in zip(texts, kept)]
