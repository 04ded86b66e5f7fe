"""Context and input-sequence construction for candidate triplets."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .extraction import CandidateTriplet, Category, EntitySpan
from .ingest import Sentence, collapse_ws, split_paragraph, tokenize, token_offsets

logger = logging.getLogger(__name__)

SEP_TOKEN = "[SEP]"
MAX_SEQUENCE_TOKENS = 512
SOURCES = ("manual", "llm", "unlabeled")


@dataclass(frozen=True)
class Example:
    triplet: CandidateTriplet
    context: tuple[str, ...]
    element_positions: tuple[tuple[int, int], ...]
    label: int | None = None
    source: str = "unlabeled"
    paragraph: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if (self.label is None) != (self.source == "unlabeled"):
            raise ValueError("label must be present exactly when source is not 'unlabeled'")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not self.context:
            raise ValueError("empty context")

    @property
    def page_id(self) -> str:
        return self.triplet.page_id

    def element_texts(self) -> tuple[str, str, str]:
        return tuple(sp.text for sp in self.triplet.elements())


def _mentions(sentence: Sentence, needle: str) -> bool:
    return bool(needle) and collapse_ws(needle) in collapse_ws(sentence.text)


def context_sentences(triplet: CandidateTriplet, paragraph: Sequence[Sentence]) -> list[Sentence]:
    """Sentences of the paragraph mentioning the triplet's time or location, in order.

    The triplet's own sentence is always included.
    """
    time_text, loc_text = triplet.time.text, triplet.location.text
    return [
        s for s in paragraph
        if s.sentence_index == triplet.sentence_index
        or _mentions(s, time_text)
        or _mentions(s, loc_text)
    ]


def build_context(triplet: CandidateTriplet, paragraph: Sequence[Sentence]) -> tuple[str, ...]:
    tokens: list[str] = []
    for s in context_sentences(triplet, paragraph):
        tokens.extend(s.tokens)
    return tuple(tokens)


def element_positions(triplet: CandidateTriplet, paragraph: Sequence[Sentence]) -> tuple[tuple[int, int], ...]:
    """Token ranges of person, time and location inside the built context."""
    offset = 0
    for s in context_sentences(triplet, paragraph):
        if s.sentence_index == triplet.sentence_index:
            return tuple((offset + sp.token_start, offset + sp.token_end) for sp in triplet.elements())
        offset += len(s.tokens)
    raise ValueError(f"source sentence {triplet.sentence_index} not in paragraph")


def build_input_sequence(
    triplet: CandidateTriplet, context: Sequence[str], max_len: int = MAX_SEQUENCE_TOKENS
) -> list[str]:
    """``person time location [SEP] context``, truncating only the context."""
    prefix: list[str] = []
    for sp in triplet.elements():
        prefix.extend(tokenize(sp.text))
    prefix.append(SEP_TOKEN)
    room = max(max_len - len(prefix), 0)
    return prefix + list(context[:room])


def find_subsequence(haystack: Sequence[str], needle: Sequence[str], prefer: int | None = None) -> int:
    if not needle:
        return -1
    hits = [
        i for i in range(len(haystack) - len(needle) + 1)
        if list(haystack[i:i + len(needle)]) == list(needle)
    ]
    if not hits:
        return -1
    if prefer is not None and prefer in hits:
        return prefer
    return hits[0]


def _locate(sentence: Sentence, category: Category, value) -> EntitySpan:
    if isinstance(value, dict):
        text, prefer = value["text"], value.get("start")
    else:
        text, prefer = str(value), None
    needle = tokenize(text)
    start = find_subsequence(sentence.tokens, needle, prefer)
    if start < 0:
        raise ValueError(f"{category.value.lower()} {text!r} not found in sentence {sentence.text!r}")
    end = start + len(needle)
    offsets = token_offsets(sentence.text, sentence.tokens)
    surface = sentence.text[offsets[start][0]:offsets[end - 1][1]]
    lemma = value.get("lemma") if isinstance(value, dict) else None
    return EntitySpan(category, start, end, surface, lemma)


def _text_of(value) -> str:
    return value["text"] if isinstance(value, dict) else str(value)


def paragraph_from_record(row: dict) -> list[Sentence]:
    page_id = str(row.get("page_id", ""))
    p_idx = int(row.get("paragraph_index", 0))
    return [
        Sentence(page_id, p_idx, i, piece, tokenize(piece))
        for i, piece in enumerate(split_paragraph(row["paragraph"]))
    ]


def _source_sentence(row: dict, paragraph: list[Sentence]) -> Sentence:
    idx = row.get("sentence_index")
    if idx is not None and 0 <= int(idx) < len(paragraph):
        return paragraph[int(idx)]
    texts = [_text_of(row[k]) for k in ("person", "time", "location")]
    for s in paragraph:
        if all(_mentions(s, t) for t in texts):
            return s
    for s in paragraph:
        if _mentions(s, texts[1]) and _mentions(s, texts[2]):
            return s
    raise ValueError(f"no sentence holds time {texts[1]!r} and location {texts[2]!r}")


def example_from_record(row: dict, source: str | None = None) -> Example:
    """Build an :class:`Example` from a dataset row.

    Rows follow the labeled-dataset schema (``person``, ``time``,
    ``location``, ``paragraph``, ``page_id`` and optionally ``label``,
    ``source``, ``paragraph_index``, ``sentence_index``). Elements may be
    plain strings or ``{"text", "start", "end"}`` objects.
    """
    paragraph = paragraph_from_record(row)
    if not paragraph:
        raise ValueError("empty paragraph")
    sent = _source_sentence(row, paragraph)
    verb = row.get("verb")
    triplet = CandidateTriplet(
        page_id=sent.page_id,
        paragraph_index=sent.paragraph_index,
        sentence_index=sent.sentence_index,
        person=_locate(sent, Category.PERSON, row["person"]),
        time=_locate(sent, Category.TIME, row["time"]),
        location=_locate(sent, Category.LOCATION, row["location"]),
        verb=_locate(sent, Category.VERB, verb) if verb else None,
    )
    label = row.get("label")
    if source is None:
        source = row.get("source") or ("manual" if label is not None else "unlabeled")
    if source == "unlabeled":
        label = None
    meta = {k: v for k, v in row.items() if k not in {"person", "time", "location", "verb", "label", "source", "paragraph"}}
    return Example(
        triplet=triplet,
        context=build_context(triplet, paragraph),
        element_positions=element_positions(triplet, paragraph),
        label=None if label is None else int(label),
        source=source,
        paragraph=row["paragraph"],
        meta=meta,
    )


def example_to_record(example: Example) -> dict:
    t = example.triplet
    row = {
        "page_id": t.page_id,
        "paragraph_index": t.paragraph_index,
        "sentence_index": t.sentence_index,
        "person": t.person.to_json(),
        "time": t.time.to_json(),
        "location": t.location.to_json(),
        "verb": t.verb.to_json() if t.verb is not None else None,
        "paragraph": example.paragraph,
        "source": example.source,
    }
    if example.label is not None:
        row["label"] = example.label
    return row


def candidate_record(triplet: CandidateTriplet, paragraph_text: str, sentence_text: str) -> dict:
    """Candidate-file row: the triplet's spans plus the text needed to rebuild context."""
    row = triplet.to_json()
    row["paragraph"] = paragraph_text
    row["sentence"] = sentence_text
    return row


def load_examples(path, source: str | None = None, errors: list | None = None) -> list[Example]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(example_from_record(json.loads(line), source))
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                if errors is not None:
                    errors.append((lineno, str(exc)))
                logger.warning("%s:%d: skipped (%s)", path, lineno, exc)
    return out


def examples_from_rows(rows: Iterable[dict], source: str | None = None) -> list[Example]:
    return [example_from_record(r, source) for r in rows]
