"""Templated synthetic SPO corpus.

Sentences are built from clauses, one triplet per clause.  Two hard cases are
injected at controlled rates:

* overlap: one subject mention is shared by 2-3 clauses ("X的妻子是Y，出生于Z")
* nesting: a company name starts with a place name that is the object of a
  ``headquarters`` triplet, so the two gold spans overlap.

Rates are realized by exact per-split quotas, so the measured train rate is
``round(rate * n) / n``.  A companion pseudo-labeled (title, content) corpus
feeds weakly supervised NER pretraining.
"""
from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field

from .data import Example, Schema, SchemaSet, make_triplet
from .tags import EntitySpan


class ConfigError(ValueError):
    pass


DEFAULT_VOCAB = ("王李张刘陈杨黄赵吴周徐孙马朱胡郭何高林罗郑梁谢宋唐许韩冯邓曹彭曾萧田董潘袁蔡蒋余"
                 "明华建国文军平志伟东海晓丽秀英静磊洋勇艳杰娟涛超霞刚桂芳玉兰云飞鹏宇浩天星月"
                 "山河江川春秋风雨花草松竹梅龙凤")
LATIN = "abcdefghijklmnopqrstuvwxyz"

TYPE_ORDER = ("Person", "Place", "Date", "Company", "Work")

# predicate -> (subject_type, object_type, full templates, tail template)
CATALOG = {
    "wife": ("Person", "Person", ("{S}的妻子是{O}", "{O}是{S}的妻子"), "妻子是{O}"),
    "birthplace": ("Person", "Place", ("{S}出生于{O}", "{S}的出生地是{O}"), "出生于{O}"),
    "birth_date": ("Person", "Date", ("{S}生于{O}", "{S}的生日是{O}"), "生于{O}"),
    "founder": ("Company", "Person", ("{S}由{O}创办", "{O}创办了{S}"), "由{O}创办"),
    "headquarters": ("Company", "Place", ("{S}总部位于{O}", "{S}的总部在{O}"), "总部位于{O}"),
    "founded_date": ("Company", "Date", ("{S}成立于{O}", "{S}创立于{O}"), "成立于{O}"),
    "author": ("Work", "Person", ("{S}的作者是{O}", "{O}写了{S}"), "作者是{O}"),
    "singer": ("Work", "Person", ("{S}由{O}演唱", "{O}演唱了{S}"), "由{O}演唱"),
    "father": ("Person", "Person", ("{S}的父亲是{O}", "{O}是{S}的父亲"), "父亲是{O}"),
    "release_date": ("Work", "Date", ("{S}发行于{O}", "{S}的发行时间是{O}"), "发行于{O}"),
}
PREFIXES = ("据报道，", "资料显示，", "近日，", "公开信息显示，")
COMPANY_SUFFIX = ("公司", "集团", "科技")
PLACE_SUFFIX = ("市", "县", "省", "")
NESTED_CLAUSES = ("{C}近日发布新品", "{C}宣布扩大规模")


@dataclass
class SyntheticConfig:
    num_entity_types: int = 5
    num_predicates: int = 8
    vocab: str = DEFAULT_VOCAB
    templates: dict[str, tuple[tuple[str, ...], str]] | None = None
    overlap_rate: float = 0.4
    nested_rate: float = 0.05
    sizes: tuple[int, int, int] = (5000, 1000, 1000)
    seed: int = 0
    names_per_type: int = 200
    latin_name_rate: float = 0.2
    marked_span_rate: float = 0.5  # raw gold spans that include the 《》 marks

    def validate(self):
        for name in ("overlap_rate", "nested_rate", "latin_name_rate", "marked_span_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if len(self.sizes) != 3 or any(n <= 0 for n in self.sizes):
            raise ConfigError(f"sizes must be three positive counts, got {self.sizes}")
        if not 1 <= self.num_entity_types <= len(TYPE_ORDER):
            raise ConfigError(f"num_entity_types must be in [1, {len(TYPE_ORDER)}]")
        if self.names_per_type <= 0:
            raise ConfigError("names_per_type must be positive")


def build_schemas(config: SyntheticConfig) -> SchemaSet:
    types = set(TYPE_ORDER[:config.num_entity_types])
    chosen = [p for p, (s, o, *_) in CATALOG.items() if s in types and o in types]
    if len(chosen) < config.num_predicates:
        raise ConfigError(f"only {len(chosen)} predicates available for "
                          f"{config.num_entity_types} entity types")
    return SchemaSet(Schema(CATALOG[p][0], p, CATALOG[p][1]) for p in chosen[:config.num_predicates])


@dataclass
class _Lexicon:
    names: dict[str, list[str]] = field(default_factory=dict)
    places: list[str] = field(default_factory=list)


def _distinct_strings(rng: random.Random, alphabet: str, lengths: tuple[int, ...], n: int,
                      taken: set[str]) -> list[str]:
    capacity = sum(len(alphabet) ** k for k in lengths)
    if capacity < 2 * (n + len(taken)):
        raise ConfigError(f"vocabulary of {len(alphabet)} characters cannot realize "
                          f"{n} distinct names of lengths {lengths}")
    out = []
    while len(out) < n:
        s = "".join(rng.choice(alphabet) for _ in range(rng.choice(lengths)))
        if s not in taken:
            taken.add(s)
            out.append(s)
    return out


def _build_lexicon(config: SyntheticConfig, rng: random.Random) -> _Lexicon:
    vocab = "".join(dict.fromkeys(config.vocab))
    if not vocab:
        raise ConfigError("empty vocabulary")
    n = config.names_per_type
    n_latin = round(n * config.latin_name_rate)
    taken: set[str] = set()
    lex = _Lexicon()
    people = _distinct_strings(rng, vocab, (2, 3), n - n_latin, taken)
    people += [s.capitalize() for s in _distinct_strings(rng, LATIN, (4, 5, 6), n_latin, taken)]
    lex.names["Person"] = people
    lex.places = _distinct_strings(rng, vocab, (2,), n, taken)
    lex.names["Place"] = [p + rng.choice(PLACE_SUFFIX) for p in lex.places]
    lex.names["Company"] = [s + rng.choice(COMPANY_SUFFIX)
                            for s in _distinct_strings(rng, vocab, (2, 3), n, taken)]
    works = _distinct_strings(rng, vocab, (2, 3, 4), n - n_latin, taken)
    works += [s.capitalize() for s in _distinct_strings(rng, LATIN, (3, 4, 5), n_latin, taken)]
    lex.names["Work"] = works
    return lex


def _date(rng: random.Random) -> str:
    y = str(rng.randint(1950, 2020)) + "年"
    grain = rng.random()
    if grain < 0.3:
        return y
    y += f"{rng.randint(1, 12)}月"
    return y if grain < 0.6 else y + f"{rng.randint(1, 28)}日"


class _SentenceBuilder:
    """Accumulates text while recording entity spans."""

    def __init__(self):
        self.parts: list[str] = []
        self.length = 0

    def add(self, s: str):
        self.parts.append(s)
        self.length += len(s)

    def add_entity(self, name: str, etype: str, marked: bool = False) -> EntitySpan:
        if etype == "Work":
            start = self.length
            self.add(f"《{name}》")
            if marked:
                return EntitySpan(start, self.length, etype)
            return EntitySpan(start + 1, self.length - 1, etype)
        start = self.length
        self.add(name)
        return EntitySpan(start, self.length, etype)

    def add_template(self, template: str, slots: dict[str, tuple]) -> dict[str, EntitySpan]:
        spans = {}
        for chunk in _split_template(template):
            if chunk in slots:
                spans[chunk] = self.add_entity(*slots[chunk])
            else:
                self.add(chunk)
        return spans

    @property
    def text(self) -> str:
        return "".join(self.parts)


def _split_template(template: str) -> list[str]:
    out, rest = [], template
    while rest:
        i = rest.find("{")
        if i < 0:
            out.append(rest)
            break
        if i:
            out.append(rest[:i])
        j = rest.index("}", i)
        out.append(rest[i:j + 1])
        rest = rest[j + 1:]
    return out


class _Generator:
    def __init__(self, config: SyntheticConfig, schemas: SchemaSet, lex: _Lexicon, rng: random.Random):
        self.config, self.schemas, self.lex, self.rng = config, schemas, lex, rng
        self.templates = {p: CATALOG[p][2:] for p in schemas.predicates}
        if config.templates:
            for p, tpl in config.templates.items():
                if p not in self.templates:
                    raise ConfigError(f"template override for unknown predicate {p!r}")
                self.templates[p] = (tuple(tpl[0]), tpl[1])
        self.by_subject: dict[str, list[str]] = {}
        for s in schemas:
            self.by_subject.setdefault(s.subject_type, []).append(s.predicate)
        self.shared_types = [t for t, ps in self.by_subject.items() if len(ps) >= 2]

    def _name(self, etype: str, used: set[str]) -> str:
        if etype == "Date":
            pool = None
        else:
            pool = self.lex.names[etype]
        for _ in range(1000):
            name = _date(self.rng) if pool is None else self.rng.choice(pool)
            if name not in used and not any(name in u or u in name for u in used):
                used.add(name)
                return name
        raise ConfigError(f"could not draw a fresh {etype} name")

    def _marked(self) -> bool:
        return self.rng.random() < self.config.marked_span_rate

    def _full_clause(self, b: _SentenceBuilder, used: set[str], triplets: list,
                     predicate: str | None = None, subject: tuple | None = None):
        predicate = predicate or self.rng.choice(self.schemas.predicates)
        schema = self.schemas.schemas[self.schemas.index(predicate)]
        if subject is None:
            subject = (self._name(schema.subject_type, used), schema.subject_type, self._marked())
        obj = (self._name(schema.object_type, used), schema.object_type, self._marked())
        spans = b.add_template(self.rng.choice(self.templates[predicate][0]), {"{S}": subject, "{O}": obj})
        triplets.append((spans["{S}"], predicate, spans["{O}"]))
        return spans["{S}"]

    def sentence(self, overlap: bool, nested: bool) -> Example:
        rng, b = self.rng, _SentenceBuilder()
        used: set[str] = set()
        triplets: list[tuple[EntitySpan, str, EntitySpan]] = []
        if rng.random() < 0.3:
            b.add(rng.choice(PREFIXES))
        clauses = []
        if overlap:
            clauses.append("shared")
        if nested:
            clauses.append("nested")
        if not overlap:
            clauses += ["single"] * (1 if rng.random() < 0.6 or nested else 2)
        elif rng.random() < 0.2:
            clauses.append("single")
        rng.shuffle(clauses)
        for k, kind in enumerate(clauses):
            if k:
                b.add("，")
            if kind == "single":
                self._full_clause(b, used, triplets)
            elif kind == "shared":
                self._shared_clauses(b, used, triplets, nested_subject=False)
            else:
                self._nested_clause(b, used, triplets, with_triplet=False)
        b.add("。")
        text = b.text
        return Example(text, tuple(make_triplet(text, s, p, o) for s, p, o in triplets))

    def _shared_clauses(self, b, used, triplets, nested_subject: bool):
        rng = self.rng
        if not self.shared_types:
            raise ConfigError("overlap requested but no subject type has two predicates")
        stype = rng.choice(self.shared_types)
        m = 2 if rng.random() < 0.7 else 3
        preds = rng.sample(self.by_subject[stype], min(m, len(self.by_subject[stype])))
        subject = (self._name(stype, used), stype, self._marked())
        subj_span = self._full_clause(b, used, triplets, preds[0], subject)
        for p in preds[1:]:
            b.add("，")
            schema = self.schemas.schemas[self.schemas.index(p)]
            obj = (self._name(schema.object_type, used), schema.object_type, self._marked())
            spans = b.add_template(self.templates[p][1], {"{O}": obj})
            triplets.append((subj_span, p, spans["{O}"]))

    def _nested_clause(self, b, used, triplets, with_triplet: bool):
        rng = self.rng
        place = rng.choice([p for p in self.lex.places if p not in used])
        stem = self._name("Company", used)
        company = place + stem
        used.add(company)
        used.add(place)
        template = rng.choice(NESTED_CLAUSES)
        pre, post = template.split("{C}")
        b.add(pre)
        start = b.length
        b.add(company)
        comp_span = EntitySpan(start, b.length, "Company")
        place_span = EntitySpan(start, start + len(place), "Place")
        b.add(post)
        triplets.append((comp_span, "headquarters", place_span))


def _split_flags(rng: random.Random, n: int, rate: float) -> list[bool]:
    k = round(rate * n)
    flags = [True] * k + [False] * (n - k)
    rng.shuffle(flags)
    return flags


def generate_synthetic_corpus(config: SyntheticConfig) -> tuple[SchemaSet, list[Example], list[Example], list[Example]]:
    config.validate()
    schemas = build_schemas(config)
    if config.nested_rate > 0 and not {"Company", "Place"} <= set(schemas.entity_types):
        raise ConfigError("nesting needs the Company and Place types")
    if config.nested_rate > 0 and "headquarters" not in schemas.predicates:
        raise ConfigError("nesting needs the headquarters predicate")
    rng = random.Random(config.seed)
    lex = _build_lexicon(config, rng)
    gen = _Generator(config, schemas, lex, rng)
    splits = []
    for n in config.sizes:
        overlap = _split_flags(rng, n, config.overlap_rate)
        nested = _split_flags(rng, n, config.nested_rate)
        splits.append([gen.sentence(o, s) for o, s in zip(overlap, nested)])
    return schemas, splits[0], splits[1], splits[2]


def has_shared_entity(example: Example) -> bool:
    counts: dict[tuple, int] = {}
    for t in example.gold_triplets:
        for span in {t.subject, t.object}:
            counts[span] = counts.get(span, 0) + 1
    return any(c >= 2 for c in counts.values())


def has_nested_spans(example: Example) -> bool:
    spans = example.gold_spans
    return any(a.overlaps(b) for a, b in itertools.combinations(spans, 2))


# --- pseudo-labeled pretraining corpus --------------------------------------

PSEUDO_TEMPLATES = ("{T}是一个常见的名字", "关于{T}的资料很多", "{T}在当地很有名", "人们经常提到{T}")


def generate_pretrain_corpus(config: SyntheticConfig, n: int, missing_rate: float = 0.05,
                             seed: int | None = None) -> list[dict]:
    """(title, content) documents; the title is mentioned 1-2 times in the content."""
    config.validate()
    rng = random.Random(config.seed if seed is None else seed)
    lex = _build_lexicon(config, random.Random(config.seed))
    types = [t for t in TYPE_ORDER[:config.num_entity_types] if t != "Date"]
    docs = []
    for _ in range(n):
        etype = rng.choice(types)
        title = rng.choice(lex.names[etype])
        mention = f"《{title}》" if etype == "Work" else title
        if rng.random() < missing_rate:
            other = rng.choice([x for x in lex.names[etype] if x != title and title not in x])
            mention = f"《{other}》" if etype == "Work" else other
        k = rng.choice((1, 1, 2))
        clauses = [rng.choice(PSEUDO_TEMPLATES).format(T=mention) for _ in range(k)]
        docs.append({"title": title, "content": "，".join(clauses) + "。"})
    return docs
