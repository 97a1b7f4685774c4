"""BIO tag inventory plus span <-> tag sequence conversion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


class TagEncodingError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class EntitySpan:
    start: int
    end: int  # exclusive
    type: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    def overlaps(self, other: "EntitySpan") -> bool:
        return self.start < other.end and other.start < self.end

    def __len__(self):
        return self.end - self.start


class TagInventory:
    """Index space for tags: ``O`` at 0, then ``B-t``, ``I-t`` per type."""

    def __init__(self, entity_types: Iterable[str]):
        self.entity_types = tuple(entity_types)
        if len(set(self.entity_types)) != len(self.entity_types):
            raise ValueError(f"duplicate entity types in {self.entity_types}")
        tags = ["O"]
        for t in self.entity_types:
            tags += [f"B-{t}", f"I-{t}"]
        self.tags = tuple(tags)
        self._index = {tag: i for i, tag in enumerate(self.tags)}

    @property
    def N(self) -> int:
        return len(self.tags)

    def __len__(self):
        return len(self.tags)

    def __eq__(self, other):
        return isinstance(other, TagInventory) and self.tags == other.tags

    def __hash__(self):
        return hash(self.tags)

    def __repr__(self):
        return f"TagInventory({list(self.entity_types)!r})"

    def index(self, tag: str) -> int:
        return self._index[tag]

    def begin(self, entity_type: str) -> int:
        return self._index[f"B-{entity_type}"]

    def inside(self, entity_type: str) -> int:
        return self._index[f"I-{entity_type}"]

    def split(self, tag_index: int) -> tuple[str, str | None]:
        """Return (prefix, type) for a tag index; ``("O", None)`` for outside."""
        if tag_index == 0:
            return "O", None
        type_idx, offset = divmod(tag_index - 1, 2)
        return ("B" if offset == 0 else "I"), self.entity_types[type_idx]


def encode_spans(spans: Sequence[EntitySpan], K: int, inv: TagInventory) -> list[int]:
    ordered = sorted(spans)
    for a, b in zip(ordered, ordered[1:]):
        if a.overlaps(b):
            raise TagEncodingError(f"overlapping spans {a} and {b}")
    tags = [0] * K
    for span in ordered:
        if span.end > K:
            raise TagEncodingError(f"span {span} exceeds sequence length {K}")
        tags[span.start] = inv.begin(span.type)
        for i in range(span.start + 1, span.end):
            tags[i] = inv.inside(span.type)
    return tags


def decode_tags(tags: Sequence[int], inv: TagInventory) -> list[EntitySpan]:
    """Decode maximal spans; an ``I-t`` that cannot continue a ``t`` span opens one."""
    spans = []
    start, cur_type = None, None
    for i, tag in enumerate(tags):
        prefix, etype = inv.split(int(tag))
        if prefix == "I" and cur_type == etype:
            continue
        if cur_type is not None:
            spans.append(EntitySpan(start, i, cur_type))
            start, cur_type = None, None
        if prefix != "O":
            start, cur_type = i, etype
    if cur_type is not None:
        spans.append(EntitySpan(start, len(tags), cur_type))
    return spans


def resolve_overlaps(spans: Iterable[EntitySpan]) -> list[EntitySpan]:
    """Keep the longest span of each overlapping group (ties: earliest start)."""
    kept: list[EntitySpan] = []
    for span in sorted(set(spans), key=lambda s: (-len(s), s.start, s.type)):
        if not any(span.overlaps(k) for k in kept):
            kept.append(span)
    return sorted(kept)
