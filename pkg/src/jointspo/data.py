"""Schemas, annotated sentences, line-oriented JSON file formats and preprocessing."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .tags import EntitySpan

log = logging.getLogger(__name__)

PUNCTUATION = frozenset("，。！？；、,.!?;")
BOOK_OPEN, BOOK_CLOSE = "《", "》"


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Schema:
    subject_type: str
    predicate: str
    object_type: str

    def __post_init__(self):
        for name in ("subject_type", "predicate", "object_type"):
            if not getattr(self, name):
                raise SchemaError(f"schema field {name} is empty")

    def to_json(self) -> dict:
        return {"subject_type": self.subject_type, "predicate": self.predicate,
                "object_type": self.object_type}


class SchemaSet:
    """Schemas indexed by predicate; predicate order is lexicographic."""

    def __init__(self, schemas: Iterable[Schema] = ()):
        by_pred: dict[str, Schema] = {}
        for s in schemas:
            if s.predicate in by_pred:
                raise SchemaError(f"duplicate predicate {s.predicate!r}")
            by_pred[s.predicate] = s
        self.schemas = tuple(by_pred[p] for p in sorted(by_pred))
        self.predicates = tuple(s.predicate for s in self.schemas)
        self._pred_index = {p: i for i, p in enumerate(self.predicates)}
        self._triples = frozenset((s.subject_type, s.predicate, s.object_type) for s in self.schemas)

    @property
    def R(self) -> int:
        return len(self.predicates)

    def __len__(self):
        return len(self.schemas)

    def __iter__(self):
        return iter(self.schemas)

    def __eq__(self, other):
        return isinstance(other, SchemaSet) and self.schemas == other.schemas

    def __repr__(self):
        return f"SchemaSet({list(self.schemas)!r})"

    def index(self, predicate: str) -> int:
        return self._pred_index[predicate]

    def allows(self, subject_type: str, predicate: str, object_type: str) -> bool:
        return (subject_type, predicate, object_type) in self._triples

    @property
    def entity_types(self) -> tuple[str, ...]:
        return tuple(sorted({t for s in self.schemas for t in (s.subject_type, s.object_type)}))


@dataclass(frozen=True)
class Triplet:
    subject_text: str
    subject_span: tuple[int, int]
    predicate: str
    object_text: str
    object_span: tuple[int, int]
    subject_type: str = ""
    object_type: str = ""

    @property
    def key(self) -> tuple[str, str, str]:
        return self.subject_text, self.predicate, self.object_text

    @property
    def subject(self) -> EntitySpan:
        return EntitySpan(*self.subject_span, self.subject_type)

    @property
    def object(self) -> EntitySpan:
        return EntitySpan(*self.object_span, self.object_type)

    def to_json(self) -> dict:
        return {
            "subject": self.subject_text, "subject_type": self.subject_type,
            "predicate": self.predicate,
            "object": self.object_text, "object_type": self.object_type,
            "subject_span": list(self.subject_span), "object_span": list(self.object_span),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Triplet":
        return cls(d["subject"], tuple(d["subject_span"]), d["predicate"],
                   d["object"], tuple(d["object_span"]),
                   d.get("subject_type", ""), d.get("object_type", ""))


def make_triplet(text: str, subj: EntitySpan, predicate: str, obj: EntitySpan) -> Triplet:
    return Triplet(text[subj.start:subj.end], (subj.start, subj.end), predicate,
                   text[obj.start:obj.end], (obj.start, obj.end), subj.type, obj.type)


@dataclass(frozen=True)
class Example:
    text: str
    gold_triplets: tuple[Triplet, ...] = ()
    extra_spans: tuple[EntitySpan, ...] = field(default=())

    @property
    def tokens(self) -> list[str]:
        return list(self.text)

    @property
    def gold_spans(self) -> list[EntitySpan]:
        spans = set(self.extra_spans)
        for t in self.gold_triplets:
            spans.add(t.subject)
            spans.add(t.object)
        return sorted(spans)

    def validate(self, schemas: SchemaSet | None = None) -> None:
        K = len(self.text)
        for span in self.gold_spans:
            if span.end > K:
                raise DataError(f"span {span} outside text of length {K}")
        for t in self.gold_triplets:
            for txt, (a, b) in ((t.subject_text, t.subject_span), (t.object_text, t.object_span)):
                if self.text[a:b] != txt:
                    raise DataError(f"span text mismatch: {self.text[a:b]!r} != {txt!r}")
            if schemas is not None and not schemas.allows(t.subject_type, t.predicate, t.object_type):
                raise DataError(f"triplet {t.key} violates schemas")

    def to_json(self) -> dict:
        return {"text": self.text, "spo_list": [t.to_json() for t in self.gold_triplets]}

    @classmethod
    def from_json(cls, d: dict) -> "Example":
        return cls(d["text"], tuple(Triplet.from_json(t) for t in d.get("spo_list", ())))


# --- files -----------------------------------------------------------------

def _json_lines(path: str | Path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: malformed line ({e.msg})") from None


def load_schemas(path: str | Path) -> SchemaSet:
    schemas = []
    seen: dict[str, int] = {}
    for lineno, rec in _json_lines(path):
        try:
            s = Schema(rec["subject_type"], rec["predicate"], rec["object_type"])
        except (KeyError, TypeError, SchemaError) as e:
            raise SchemaError(f"{path}:{lineno}: malformed schema record ({e})") from None
        if s.predicate in seen:
            raise SchemaError(f"{path}:{lineno}: duplicate predicate {s.predicate!r} "
                              f"(first on line {seen[s.predicate]})")
        seen[s.predicate] = lineno
        schemas.append(s)
    return SchemaSet(schemas)


def save_schemas(schemas: SchemaSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in schemas:
            f.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def dumps_example(example: Example, **extra) -> str:
    rec = example.to_json()
    rec.update(extra)
    return json.dumps(rec, ensure_ascii=False)


def load_dataset(path: str | Path) -> list[Example]:
    out = []
    for lineno, rec in _json_lines(path):
        try:
            out.append(Example.from_json(rec))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: malformed record ({e})") from None
    return out


def save_dataset(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(dumps_example(ex) + "\n")


# --- preprocessing -----------------------------------------------------------

@dataclass
class PreprocessStats:
    dropped_triplets: int = 0
    hard_splits: int = 0


def normalize_text(s: str) -> str:
    """Lowercase characters whose lowercase form is a single character."""
    return "".join(c.lower() if len(c.lower()) == 1 else c for c in s)


def strip_book_marks(text: str, start: int, end: int) -> tuple[int, int]:
    while end - start > 2 and text[start] == BOOK_OPEN and text[end - 1] == BOOK_CLOSE:
        start, end = start + 1, end - 1
    return start, end


def normalize_entity(s: str) -> str:
    s = normalize_text(s)
    a, b = strip_book_marks(s, 0, len(s))
    return s[a:b]


def _piece_bounds(text: str, max_len: int, stats: PreprocessStats) -> list[tuple[int, int]]:
    clauses, start = [], 0
    for i, c in enumerate(text):
        if c in PUNCTUATION:
            clauses.append((start, i + 1))
            start = i + 1
    if start < len(text):
        clauses.append((start, len(text)))
    pieces: list[tuple[int, int]] = []
    cur = None
    for a, b in clauses:
        while b - a > max_len:
            stats.hard_splits += 1
            if cur is not None:
                pieces.append(cur)
                cur = None
            pieces.append((a, a + max_len))
            a += max_len
        if cur is not None and b - cur[0] <= max_len:
            cur = (cur[0], b)
        else:
            if cur is not None:
                pieces.append(cur)
            cur = (a, b)
    if cur is not None:
        pieces.append(cur)
    return pieces


def preprocess(example: Example, max_len: int = 128,
               stats: PreprocessStats | None = None) -> list[Example]:
    if not example.text:
        raise DataError("cannot preprocess an empty sentence")
    stats = stats if stats is not None else PreprocessStats()
    text = normalize_text(example.text)

    def fix(span: tuple[int, int]) -> tuple[int, int]:
        return strip_book_marks(text, *span)

    triplets = []
    for t in example.gold_triplets:
        s, o = fix(t.subject_span), fix(t.object_span)
        triplets.append(replace(t, subject_span=s, subject_text=text[s[0]:s[1]],
                                object_span=o, object_text=text[o[0]:o[1]]))
    extra = [EntitySpan(*fix((sp.start, sp.end)), sp.type) for sp in example.extra_spans]

    if len(text) <= max_len:
        return [Example(text, tuple(triplets), tuple(extra))]

    out = []
    before = stats.hard_splits
    bounds = _piece_bounds(text, max_len, stats)
    if stats.hard_splits > before:
        log.warning("hard split of a punctuation-free run longer than %d", max_len)
    placed = [False] * len(triplets)
    for a, b in bounds:
        inside = lambda sp: a <= sp[0] and sp[1] <= b  # noqa: E731
        piece_trips = []
        for k, t in enumerate(triplets):
            if inside(t.subject_span) and inside(t.object_span):
                placed[k] = True
                piece_trips.append(replace(
                    t, subject_span=(t.subject_span[0] - a, t.subject_span[1] - a),
                    object_span=(t.object_span[0] - a, t.object_span[1] - a)))
        piece_extra = [EntitySpan(s.start - a, s.end - a, s.type) for s in extra
                       if inside((s.start, s.end))]
        out.append(Example(text[a:b], tuple(piece_trips), tuple(piece_extra)))
    stats.dropped_triplets += placed.count(False)
    return out


def preprocess_all(examples: Sequence[Example], max_len: int = 128,
                   stats: PreprocessStats | None = None) -> list[Example]:
    out = []
    for ex in examples:
        out.extend(preprocess(ex, max_len, stats))
    return out
