"""Candidate (person, time, location) extraction over dependency parses.

Entities are grouped into four categories, then for every person mention the
closest verb in the parse tree is chosen, and the time and location mentions
closest to that verb complete the triplet. Closeness is the tree distance
through the lowest common ancestor.

The NLP backend is any object with ``annotate(sentence) -> SentenceAnnotation``.
:class:`FileAnnotationBackend` reads precomputed annotations and is read-only
after loading, so a single instance can be shared across worker threads.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .ingest import BiographyPage, Sentence, segment_sentences, token_offsets

logger = logging.getLogger(__name__)

MAX_SENTENCE_TOKENS = 512


class Category(str, enum.Enum):
    PERSON = "PERSON"
    TIME = "TIME"
    LOCATION = "LOCATION"
    VERB = "VERB"


LABEL_CATEGORIES = {
    "PERSON": Category.PERSON,
    "DATE": Category.TIME,
    "TIME": Category.TIME,
    "DURATION": Category.TIME,
    "GPE": Category.LOCATION,
    "LOC": Category.LOCATION,
    "EVENT": Category.LOCATION,
    "FAC": Category.LOCATION,
    "ORG": Category.LOCATION,
}

PERSONAL_PRONOUNS = frozenset("i me he him she her we us they them".split())
VERB_TAGS = frozenset({"VERB", "AUX"})


@dataclass(frozen=True)
class EntitySpan:
    category: Category
    token_start: int
    token_end: int
    text: str
    lemma: str | None = None

    def __post_init__(self):
        if not 0 <= self.token_start < self.token_end:
            raise ValueError(f"bad span [{self.token_start}, {self.token_end})")

    def __len__(self) -> int:
        return self.token_end - self.token_start

    def to_json(self) -> dict:
        out = {"text": self.text, "start": self.token_start, "end": self.token_end}
        if self.lemma is not None:
            out["lemma"] = self.lemma
        return out

    @classmethod
    def from_json(cls, category: Category, obj: dict) -> "EntitySpan":
        return cls(Category(category), int(obj["start"]), int(obj["end"]), obj["text"], obj.get("lemma"))


class ParseTree:
    """Dependency tree given as a head index per token.

    The root's head is either itself or a negative sentinel.
    """

    def __init__(self, heads: Sequence[int]):
        n = len(heads)
        if n == 0:
            raise ValueError("empty parse tree")
        self.heads = [h if 0 <= h < n and h != i else -1 for i, h in enumerate(heads)]
        for i, h in enumerate(heads):
            if h >= n:
                raise ValueError(f"head {h} of token {i} out of range")
        roots = [i for i, h in enumerate(self.heads) if h == -1]
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root, found {len(roots)}")
        self.root = roots[0]
        self._depth = [-1] * n
        for i in range(n):
            self._resolve_depth(i)

    def _resolve_depth(self, i: int) -> int:
        chain = []
        node = i
        while self._depth[node] < 0:
            if node in chain:
                raise ValueError("parse tree contains a cycle")
            chain.append(node)
            if self.heads[node] == -1:
                self._depth[node] = 0
                chain.pop()
                break
            node = self.heads[node]
        d = self._depth[node]
        for node in reversed(chain):
            d += 1
            self._depth[node] = d
        return self._depth[i]

    def __len__(self) -> int:
        return len(self.heads)

    def depth(self, i: int) -> int:
        return self._depth[i]

    def _check(self, i: int):
        if not (isinstance(i, int) and 0 <= i < len(self.heads)):
            raise IndexError(f"token index {i} outside tree of size {len(self.heads)}")

    def lca(self, a: int, b: int) -> int:
        self._check(a)
        self._check(b)
        while self._depth[a] > self._depth[b]:
            a = self.heads[a]
        while self._depth[b] > self._depth[a]:
            b = self.heads[b]
        while a != b:
            a, b = self.heads[a], self.heads[b]
        return a

    def span_head(self, start: int, end: int) -> int:
        """Syntactic head of a token span: the shallowest token whose head lies
        outside the span. Falls back to the last token."""
        outside = [
            i for i in range(start, end)
            if self.heads[i] == -1 or not start <= self.heads[i] < end
        ]
        if not outside:
            return end - 1
        return min(outside, key=lambda i: (self._depth[i], -i))


def lca_distance(tree: ParseTree, a: int, b: int) -> int:
    """Edges from ``a`` up to the LCA plus edges from ``b`` up to the LCA."""
    anc = tree.lca(a, b)
    return tree.depth(a) + tree.depth(b) - 2 * tree.depth(anc)


@dataclass(frozen=True)
class CandidateTriplet:
    page_id: str
    paragraph_index: int
    sentence_index: int
    person: EntitySpan
    time: EntitySpan
    location: EntitySpan
    verb: EntitySpan | None = None

    @property
    def sentence_key(self) -> tuple[str, int, int]:
        return (self.page_id, self.paragraph_index, self.sentence_index)

    def elements(self) -> tuple[EntitySpan, EntitySpan, EntitySpan]:
        return (self.person, self.time, self.location)

    def to_json(self) -> dict:
        return {
            "page_id": self.page_id,
            "paragraph_index": self.paragraph_index,
            "sentence_index": self.sentence_index,
            "person": self.person.to_json(),
            "time": self.time.to_json(),
            "location": self.location.to_json(),
            "verb": self.verb.to_json() if self.verb is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CandidateTriplet":
        verb = obj.get("verb")
        return cls(
            page_id=str(obj["page_id"]),
            paragraph_index=int(obj["paragraph_index"]),
            sentence_index=int(obj["sentence_index"]),
            person=EntitySpan.from_json(Category.PERSON, obj["person"]),
            time=EntitySpan.from_json(Category.TIME, obj["time"]),
            location=EntitySpan.from_json(Category.LOCATION, obj["location"]),
            verb=EntitySpan.from_json(Category.VERB, verb) if verb else None,
        )


@dataclass(frozen=True)
class RawEntity:
    label: str
    start: int
    end: int


@dataclass
class SentenceAnnotation:
    tokens: list[str]
    entities: list[RawEntity]
    heads: list[int]
    pos: list[str] | None = None
    lemmas: list[str] | None = None

    @classmethod
    def from_json(cls, obj: dict) -> "SentenceAnnotation":
        return cls(
            tokens=list(obj["tokens"]),
            entities=[RawEntity(e["label"], int(e["start"]), int(e["end"])) for e in obj.get("entities", [])],
            heads=[int(h) for h in obj["heads"]],
            pos=obj.get("pos"),
            lemmas=obj.get("lemmas"),
        )


class NLPBackend(Protocol):
    def annotate(self, sentence: Sentence) -> SentenceAnnotation: ...


class FileAnnotationBackend:
    """Precomputed annotations keyed by (page_id, paragraph_index, sentence_index)."""

    def __init__(self, records: Iterable[dict] = ()):
        self._by_key: dict[tuple[str, int, int], SentenceAnnotation] = {}
        for obj in records:
            key = (str(obj["page_id"]), int(obj["paragraph_index"]), int(obj["sentence_index"]))
            self._by_key[key] = SentenceAnnotation.from_json(obj)

    @classmethod
    def from_path(cls, path) -> "FileAnnotationBackend":
        with Path(path).open(encoding="utf-8") as fh:
            return cls(json.loads(line) for line in fh if line.strip())

    def __len__(self) -> int:
        return len(self._by_key)

    def annotate(self, sentence: Sentence) -> SentenceAnnotation:
        try:
            return self._by_key[sentence.key]
        except KeyError:
            raise LookupError(f"no annotation for sentence {sentence.key}") from None


def _span_text(text: str, offsets, start: int, end: int) -> str:
    return text[offsets[start][0]:offsets[end - 1][1]]


def _dedupe(spans: list[EntitySpan]) -> list[EntitySpan]:
    # Overlapping spans of one category: keep the longer (earlier on ties).
    kept: list[EntitySpan] = []
    for sp in sorted(spans, key=lambda s: (-len(s), s.token_start)):
        if all(
            other.category != sp.category
            or sp.token_end <= other.token_start
            or other.token_end <= sp.token_start
            for other in kept
        ):
            kept.append(sp)
    return sorted(kept, key=lambda s: (s.token_start, s.token_end, s.category.value))


def categorize_entities(sentence: Sentence, annotation: SentenceAnnotation) -> list[EntitySpan]:
    tokens = annotation.tokens
    n = len(tokens)
    try:
        offsets = token_offsets(sentence.text, tokens)
        def text_of(s, e):
            return _span_text(sentence.text, offsets, s, e)
    except ValueError:
        def text_of(s, e):
            return " ".join(tokens[s:e])

    spans = []
    for ent in annotation.entities:
        cat = LABEL_CATEGORIES.get(ent.label.upper())
        if cat is None:
            continue
        if not 0 <= ent.start < ent.end <= n:
            logger.warning("entity %s outside sentence %s", ent, sentence.key)
            continue
        spans.append(EntitySpan(cat, ent.start, ent.end, text_of(ent.start, ent.end)))

    for i, tok in enumerate(tokens):
        pos = annotation.pos[i] if annotation.pos else None
        if tok.lower() in PERSONAL_PRONOUNS and pos in (None, "PRON"):
            spans.append(EntitySpan(Category.PERSON, i, i + 1, text_of(i, i + 1)))
        if pos in VERB_TAGS:
            lemma = annotation.lemmas[i] if annotation.lemmas else tok.lower()
            spans.append(EntitySpan(Category.VERB, i, i + 1, text_of(i, i + 1), lemma))
    return _dedupe(spans)


def _closest(tree: ParseTree, pivot: int, spans: Sequence[EntitySpan]) -> EntitySpan:
    def key(sp):
        anchor = tree.span_head(sp.token_start, sp.token_end)
        return (lca_distance(tree, anchor, pivot), abs(anchor - pivot), sp.token_start)
    return min(spans, key=key)


def select_relevant_pairs(
    entities: Sequence[EntitySpan],
    tree: ParseTree,
    sentence_key: tuple[str, int, int] = ("", 0, 0),
) -> list[CandidateTriplet]:
    """One triplet per person span: person -> nearest verb -> nearest time and location.

    Ties are broken by linear distance between anchor tokens, then by the
    leftmost span.
    """
    by_cat: dict[Category, list[EntitySpan]] = {c: [] for c in Category}
    for sp in entities:
        by_cat[sp.category].append(sp)
    verbs = by_cat[Category.VERB]
    if not verbs or not by_cat[Category.TIME] or not by_cat[Category.LOCATION]:
        return []
    page_id, p_idx, s_idx = sentence_key
    out = []
    for person in by_cat[Category.PERSON]:
        p_anchor = tree.span_head(person.token_start, person.token_end)
        verb = _closest(tree, p_anchor, verbs)
        v_anchor = tree.span_head(verb.token_start, verb.token_end)
        time = _closest(tree, v_anchor, by_cat[Category.TIME])
        location = _closest(tree, v_anchor, by_cat[Category.LOCATION])
        out.append(CandidateTriplet(page_id, p_idx, s_idx, person, time, location, verb))
    return out


def sentence_candidates(sentence: Sentence, annotation: SentenceAnnotation) -> list[CandidateTriplet]:
    if len(annotation.tokens) > MAX_SENTENCE_TOKENS:
        logger.warning("skipping %s: %d tokens", sentence.key, len(annotation.tokens))
        return []
    entities = categorize_entities(sentence, annotation)
    cats = {sp.category for sp in entities}
    if Category.TIME not in cats or Category.LOCATION not in cats:
        return []
    tree = ParseTree(annotation.heads)
    return select_relevant_pairs(entities, tree, sentence.key)


def extract_candidates(page: BiographyPage, backend: NLPBackend) -> list[CandidateTriplet]:
    out = []
    for sentence in segment_sentences(page):
        try:
            annotation = backend.annotate(sentence)
            out.extend(sentence_candidates(sentence, annotation))
        except (LookupError, ValueError) as exc:
            logger.warning("skipping sentence %s: %s", sentence.key, exc)
    return out
