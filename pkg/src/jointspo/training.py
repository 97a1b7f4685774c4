"""Training, weakly supervised NER pretraining, prediction and evaluation."""
from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import (Example, PreprocessStats, SchemaSet, Triplet, dumps_example, normalize_entity,
                   normalize_text, preprocess, preprocess_all)
from .inference import TripletCandidate, decode_triplets, postprocess
from .model import Bundle, CharVocab, JointModel, ModelConfig, collate, transfer_encoder
from .tags import EntitySpan, TagInventory, decode_tags

log = logging.getLogger(__name__)

PSEUDO_TYPE = "ENT"


class TrainingDiverged(RuntimeError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class TrainConfig:
    max_seq_len: int = 128
    learning_rate: float = 2e-5
    dropout: float = 0.1
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    threshold: float = 0.5
    grad_clip: float = 5.0
    schedule: str = "constant"  # "constant" | "linear" (warmup then linear decay)
    warmup: float = 0.05
    # model switches
    label_mode: str = "soft"
    scale_by_N: bool = True
    label_only: bool = False
    use_global: bool = True
    encoder: str = "lstm"
    hidden: int = 64
    char_dim: int = 64
    label_dim: int = 32
    pair_dim: int = 64
    selection_hidden: int = 64
    encoder_layers: int = 2
    heads: int = 4
    output_prior: float | None = None

    def __post_init__(self):
        if self.max_seq_len <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold {self.threshold} outside (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names - {"version"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in names})

    def model_config(self, vocab_size: int, num_tags: int, num_relations: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, num_tags=num_tags, num_relations=num_relations,
            hidden=self.hidden, char_dim=self.char_dim, label_dim=self.label_dim,
            pair_dim=self.pair_dim, selection_hidden=self.selection_hidden,
            encoder=self.encoder, encoder_layers=self.encoder_layers, heads=self.heads,
            dropout=self.dropout, max_len=self.max_seq_len, label_mode=self.label_mode,
            scale_by_N=self.scale_by_N, label_only=self.label_only, use_global=self.use_global,
            output_prior=self.output_prior)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    gold: int
    predicted: int
    correct: int

    @classmethod
    def from_counts(cls, gold: int, predicted: int, correct: int) -> "EvalReport":
        p = correct / predicted if predicted else 0.0
        r = correct / gold if gold else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f1, gold, predicted, correct)

    def line(self) -> str:
        return (f"P={self.precision:.4f} R={self.recall:.4f} F1={self.f1:.4f} "
                f"(gold={self.gold} pred={self.predicted} correct={self.correct})")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    bundle: Bundle
    history: list[EvalReport]
    steps: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def _batches(n: int, batch_size: int, rng: random.Random | None):
    order = list(range(n))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _fit(bundle: Bundle, examples: Sequence[Example], config: TrainConfig,
         on_epoch=None) -> list[dict]:
    model = bundle.model
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    total = config.epochs * math.ceil(len(examples) / config.batch_size)
    sched = None
    if config.schedule == "linear":
        warm = max(1, int(config.warmup * total))
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda k: min((k + 1) / warm, max(0.0, (total - k) / max(1, total - warm))))
    rng = random.Random(config.seed)
    steps: list[dict] = []
    last_finite = None
    for epoch in range(config.epochs):
        model.train()
        for idx in _batches(len(examples), config.batch_size, rng):
            batch = collate([examples[i] for i in idx], bundle.vocab, bundle.inventory, bundle.schemas)
            losses = model.losses(batch)
            record = {k: v.item() for k, v in losses.items()}
            if not math.isfinite(record["total"]):
                raise TrainingDiverged(f"non-finite loss at step {len(steps)} (epoch {epoch}); "
                                       f"last finite step: {last_finite}")
            opt.zero_grad()
            losses["total"].backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            record.update(step=len(steps), epoch=epoch)
            steps.append(record)
            last_finite = record
        log.info("epoch %d: last step %s", epoch, {k: round(v, 4) for k, v in last_finite.items()})
        if on_epoch is not None:
            on_epoch(epoch)
    return steps


def new_bundle(config: TrainConfig, schemas: SchemaSet | None, texts: Iterable[str],
               entity_types: Sequence[str], init: Bundle | None = None) -> Bundle:
    seed_everything(config.seed)
    vocab = CharVocab.build(texts, base=init.vocab if init else None)
    inv = TagInventory(entity_types)
    R = schemas.R if schemas is not None else 0
    model = JointModel(config.model_config(len(vocab), inv.N, R))
    bundle = Bundle(model, vocab, inv, schemas, {"train_config": asdict(config)})
    if init is not None:
        transfer_encoder(bundle, init)
        if bundle.inventory != inv:
            raise AssertionError("initialization changed the tag inventory")
    return bundle


def train(config: TrainConfig, schemas: SchemaSet, train_set: Sequence[Example],
          dev_set: Sequence[Example], init: Bundle | None = None) -> TrainResult:
    for ex in train_set:
        ex.validate(schemas)
    stats = PreprocessStats()
    train_pieces = [p for p in preprocess_all(train_set, config.max_seq_len, stats) if p.text]
    if stats.dropped_triplets:
        log.info("preprocessing dropped %d straddling triplets", stats.dropped_triplets)
    bundle = new_bundle(config, schemas, [p.text for p in train_pieces], schemas.entity_types, init)
    history: list[EvalReport] = []
    best = {"f1": -1.0, "state": None, "epoch": 0}

    def on_epoch(epoch):
        preds = predict(bundle, dev_set, config.threshold)
        report = evaluate(preds, dev_set)
        history.append(report)
        log.info("epoch %d dev %s", epoch, report.line())
        if report.f1 > best["f1"]:
            best.update(f1=report.f1, state=copy.deepcopy(bundle.model.state_dict()), epoch=epoch)

    steps = _fit(bundle, train_pieces, config, on_epoch)
    bundle.model.load_state_dict(best["state"])
    bundle.model.eval()
    bundle.meta.update(best_epoch=best["epoch"], dev_f1=best["f1"])
    return TrainResult(bundle, history, steps, best["epoch"])


# --- weakly supervised NER pretraining ---------------------------------------

def pseudo_label(content: str, title: str) -> Example | None:
    """Mark every non-overlapping occurrence of the title as a pseudo entity."""
    text, needle = normalize_text(content), normalize_text(title)
    if not needle:
        return None
    spans, i = [], text.find(needle)
    while i >= 0:
        spans.append(EntitySpan(i, i + len(needle), PSEUDO_TYPE))
        i = text.find(needle, i + len(needle))
    if not spans:
        return None
    return Example(text, (), tuple(spans))


@dataclass
class PretrainResult:
    bundle: Bundle
    skipped: int
    steps: list[dict]


def pretrain_ner(config: TrainConfig, docs: Sequence[dict]) -> PretrainResult:
    """Train encoder + CRF on title pseudo labels with the NER loss only."""
    examples, skipped = [], 0
    for d in docs:
        ex = pseudo_label(d["content"], d["title"])
        if ex is None:
            skipped += 1
        else:
            examples.append(ex)
    if skipped:
        log.info("pretraining skipped %d documents without a title mention", skipped)
    pieces = [p for p in preprocess_all(examples, config.max_seq_len) if p.text]
    bundle = new_bundle(config, None, [p.text for p in pieces], [PSEUDO_TYPE])
    steps = _fit(bundle, pieces, config)
    bundle.model.eval()
    bundle.meta.update(pretrain_skipped=skipped, pretrain_docs=len(docs))
    return PretrainResult(bundle, skipped, steps)


# --- prediction ------------------------------------------------------------

@dataclass
class Prediction:
    text: str                      # normalized sentence text
    candidates: list[TripletCandidate]
    entities: list[EntitySpan] = field(default_factory=list)  # decoded spans, sentence offsets

    def to_example(self) -> Example:
        return Example(self.text, tuple(c.triplet for c in self.candidates))


def predict(bundle: Bundle, examples: Sequence[Example], threshold: float = 0.5,
            batch_size: int = 64, post: bool = True, source: str = "") -> list[Prediction]:
    """Predict candidates for raw sentences (split, decoded, re-assembled)."""
    model = bundle.model
    max_len = model.cfg.max_len
    pieces, owner, offsets = [], [], []
    for n, ex in enumerate(examples):
        off = 0
        for p in preprocess(Example(ex.text), max_len):
            pieces.append(p)
            owner.append(n)
            offsets.append(off)
            off += len(p.text)
    per_sentence: list[list[TripletCandidate]] = [[] for _ in examples]
    spans: list[list[EntitySpan]] = [[] for _ in examples]
    predicates = bundle.schemas.predicates if bundle.schemas is not None else ()
    for idx in _batches(len(pieces), batch_size, None):
        batch = collate([pieces[i] for i in idx], bundle.vocab, bundle.inventory, None)
        out = model.predict(batch["chars"], batch["mask"])
        sel = out["selection"].numpy()
        glob = out["global"].numpy()
        for b, i in enumerate(idx):
            L = len(pieces[i].text)
            cands = decode_triplets(out["tags"][b], sel[b, :L, :L], threshold, pieces[i].text,
                                    bundle.inventory, predicates, glob[b], source)
            per_sentence[owner[i]].extend(_shift(c, offsets[i]) for c in cands)
            spans[owner[i]].extend(EntitySpan(e.start + offsets[i], e.end + offsets[i], e.type)
                                   for e in decode_tags(out["tags"][b][:L], bundle.inventory))
    preds = []
    for ex, cands, ents in zip(examples, per_sentence, spans):
        text = normalize_text(ex.text)
        cands.sort(key=lambda c: -c.pair_prob)
        if post:
            cands = postprocess(cands, text, bundle.schemas)
        preds.append(Prediction(text, cands, ents))
    return preds


def _shift(c: TripletCandidate, off: int) -> TripletCandidate:
    if not off:
        return c
    t = c.triplet
    return replace(c, triplet=replace(
        t, subject_span=(t.subject_span[0] + off, t.subject_span[1] + off),
        object_span=(t.object_span[0] + off, t.object_span[1] + off)))


def candidate_json(c: TripletCandidate) -> dict:
    d = c.triplet.to_json()
    d.update(pair_prob=round(c.pair_prob, 6), global_prob=round(c.global_prob, 6))
    if c.pair_dist:
        d["pair_dist"] = [round(x, 6) for x in c.pair_dist]
    if c.global_dist:
        d["global_dist"] = [round(x, 6) for x in c.global_dist]
    if c.source:
        d["source"] = c.source
    return d


def save_predictions(preds: Sequence[Prediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in preds:
            rec = {"text": p.text, "spo_list": [candidate_json(c) for c in p.candidates],
                   "entities": [[e.start, e.end, e.type] for e in p.entities]}
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_predictions(path: str | Path, source: str | None = None) -> list[Prediction]:
    """Read a prediction file; ``source`` overrides the per-candidate source tag."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            cands = [TripletCandidate(Triplet.from_json(d), float(d.get("pair_prob", 1.0)),
                                      float(d.get("global_prob", 0.5)),
                                      tuple(d.get("pair_dist", ())), tuple(d.get("global_dist", ())),
                                      d.get("source", "") if source is None else source)
                     for d in rec.get("spo_list", ())]
            ents = [EntitySpan(a, b, t) for a, b, t in rec.get("entities", ())]
            out.append(Prediction(rec["text"], cands, ents))
    return out


# --- metrics ---------------------------------------------------------------

def triplet_keys(triplets: Iterable[Triplet]) -> set[tuple[str, str, str]]:
    return {(normalize_entity(t.subject_text), t.predicate, normalize_entity(t.object_text))
            for t in triplets}


def _aligned(pred, gold):
    pred = [p.to_example() if isinstance(p, Prediction) else p for p in pred]
    if len(pred) != len(gold):
        raise AlignmentError(f"{len(pred)} predicted sentences vs {len(gold)} gold sentences")
    for n, (p, g) in enumerate(zip(pred, gold)):
        if normalize_text(p.text) != normalize_text(g.text):
            raise AlignmentError(f"sentence {n} differs: {p.text!r} vs {g.text!r}")
    return pred


def evaluate(pred: Sequence[Example | Prediction], gold: Sequence[Example]) -> EvalReport:
    """Exact match on normalized (subject, predicate, object) strings; duplicates count once."""
    pred = _aligned(pred, gold)
    n_gold = n_pred = n_correct = 0
    for p, g in zip(pred, gold):
        pk, gk = triplet_keys(p.gold_triplets), triplet_keys(g.gold_triplets)
        n_gold += len(gk)
        n_pred += len(pk)
        n_correct += len(pk & gk)
    return EvalReport.from_counts(n_gold, n_pred, n_correct)


def pr_curve(pred: Sequence[Prediction], gold: Sequence[Example]) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) at every observed candidate probability, ascending."""
    _aligned(pred, gold)
    scored = []
    n_gold = 0
    for p, g in zip(pred, gold):
        gk = triplet_keys(g.gold_triplets)
        n_gold += len(gk)
        best: dict[tuple, float] = {}
        for c in p.candidates:
            k = next(iter(triplet_keys([c.triplet])))
            best[k] = max(best.get(k, 0.0), c.pair_prob)
        scored += [(prob, k in gk) for k, prob in best.items()]
    if not scored:
        return [(1.0, 0.0, 0.0)]
    scored.sort(key=lambda x: -x[0])
    points = []
    tp = 0
    for n, (prob, ok) in enumerate(scored, 1):
        tp += ok
        if n == len(scored) or scored[n][0] != prob:
            points.append((prob, tp / n, tp / n_gold if n_gold else 0.0))
    return points[::-1]


# --- ablation grid -----------------------------------------------------------

ABLATION_ROWS = (
    ("Baseline", dict(label_mode="hard", use_global=False), False),
    ("Baseline+NER Pretraining", dict(label_mode="hard", use_global=False), True),
    ("Baseline+Soft label embedding", dict(label_mode="soft", use_global=False), False),
    ("Baseline+Global Predicate Prediction", dict(label_mode="hard", use_global=True), False),
    ("Baseline+Soft+Global", dict(label_mode="soft", use_global=True), False),
    ("Baseline+all", dict(label_mode="soft", use_global=True), True),
)


@dataclass
class AblationRow:
    name: str
    report: EvalReport
    delta_f1: float
    result: TrainResult | None = None


def ablation_suite(base: TrainConfig, schemas: SchemaSet, train_set: Sequence[Example],
                   dev_set: Sequence[Example], pretrain_docs: Sequence[dict],
                   pretrain_config: TrainConfig | None = None,
                   pretrained: Bundle | None = None) -> list[AblationRow]:
    if pretrained is None:
        pretrained = pretrain_ner(pretrain_config or base, pretrain_docs).bundle
    rows = []
    for name, switches, use_pretrain in ABLATION_ROWS:
        cfg = replace(base, **switches)
        res = train(cfg, schemas, train_set, dev_set, init=pretrained if use_pretrain else None)
        best = max(res.history, key=lambda r: r.f1)
        rows.append(AblationRow(name, best, 0.0, res))
    base_f1 = rows[0].report.f1
    for row in rows:
        row.delta_f1 = row.report.f1 - base_f1
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'Model':<40} {'dev-P':>7} {'dev-R':>7} {'dev-F1':>7} {'dF1':>8}"]
    for r in rows:
        lines.append(f"{r.name:<40} {r.report.precision:7.4f} {r.report.recall:7.4f} "
                     f"{r.report.f1:7.4f} {r.delta_f1:+8.4f}")
    return "\n".join(lines)
