"""Corpus loading, sentence segmentation and target-sentence filtering."""
from __future__ import annotations

import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

logger = logging.getLogger(__name__)

TOKEN_RE = re.compile(r"\w+|[^\w\s]")

# Sentence-final punctuation plus trailing closers, then whitespace.
_BOUNDARY_RE = re.compile(r"[.!?]+[\"'”’)\]]*(?=\s+)")
_NEXT_START_RE = re.compile(r"\s+[\"'“‘(\[]?[A-Z0-9]")

ABBREVIATIONS = frozenset(
    """
    dr mr mrs ms prof st jr sr gen col lt capt cpt sgt rev hon gov pres sen rep
    fr mt ft no vs etc inc ltd co corp dept univ assn bros ave blvd est approx
    jan feb mar apr jun jul aug sep sept oct nov dec
    """.split()
)


@dataclass(frozen=True)
class BiographyPage:
    page_id: str
    title: str
    paragraphs: tuple[str, ...]


@dataclass(frozen=True)
class Sentence:
    page_id: str
    paragraph_index: int
    sentence_index: int
    text: str
    tokens: tuple[str, ...] = field(default=())

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.page_id, self.paragraph_index, self.sentence_index)

    def to_json(self) -> dict:
        return {
            "page_id": self.page_id,
            "paragraph_index": self.paragraph_index,
            "sentence_index": self.sentence_index,
            "text": self.text,
            "tokens": list(self.tokens),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Sentence":
        text = obj["text"]
        tokens = obj.get("tokens") or tokenize(text)
        return cls(
            page_id=str(obj["page_id"]),
            paragraph_index=int(obj["paragraph_index"]),
            sentence_index=int(obj["sentence_index"]),
            text=text,
            tokens=tuple(tokens),
        )


@dataclass(frozen=True)
class RecordError:
    line: int
    message: str


class CorpusFormatError(ValueError):
    pass


def normalize_text(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def collapse_ws(text: str) -> str:
    return " ".join(text.split())


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(TOKEN_RE.findall(text))


def token_offsets(text: str, tokens: Sequence[str]) -> list[tuple[int, int]]:
    """Character offsets of ``tokens`` in ``text``, aligned left to right."""
    offsets = []
    pos = 0
    for tok in tokens:
        start = text.find(tok, pos)
        if start < 0:
            raise ValueError(f"token {tok!r} not found in {text!r} after offset {pos}")
        end = start + len(tok)
        offsets.append((start, end))
        pos = end
    return offsets


def _parse_page(obj) -> BiographyPage:
    if not isinstance(obj, dict):
        raise CorpusFormatError("record is not a JSON object")
    for key in ("page_id", "title", "paragraphs"):
        if key not in obj:
            raise CorpusFormatError(f"missing field {key!r}")
    if not isinstance(obj["page_id"], str) or not isinstance(obj["title"], str):
        raise CorpusFormatError("page_id and title must be strings")
    paragraphs = obj["paragraphs"]
    if not isinstance(paragraphs, list) or not all(isinstance(p, str) for p in paragraphs):
        raise CorpusFormatError("paragraphs must be a list of strings")
    return BiographyPage(
        page_id=normalize_text(obj["page_id"]),
        title=normalize_text(obj["title"]),
        paragraphs=tuple(normalize_text(p) for p in paragraphs),
    )


def load_corpus(path, errors: list[RecordError] | None = None) -> Iterator[BiographyPage]:
    """Yield pages from a JSON Lines corpus in file order.

    Malformed lines do not stop the stream. Each one is appended to
    ``errors`` as a :class:`RecordError` (or logged when no list is given).
    Duplicate page ids count as malformed.
    """
    seen: set[str] = set()
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                page = _parse_page(json.loads(line))
                if page.page_id in seen:
                    raise CorpusFormatError(f"duplicate page_id {page.page_id!r}")
            except (json.JSONDecodeError, CorpusFormatError) as exc:
                err = RecordError(lineno, str(exc))
                if errors is None:
                    logger.warning("%s:%d: %s", path, err.line, err.message)
                else:
                    errors.append(err)
                continue
            seen.add(page.page_id)
            yield page


def _is_abbreviation(text: str, dot_pos: int) -> bool:
    m = re.search(r"(\w+)$", text[:dot_pos])
    if m is None:
        return False
    word = m.group(1)
    if len(word) == 1 and word.isalpha() and word.isupper():
        return True  # initial, e.g. "H. Bruce Franklin"
    return word.lower() in ABBREVIATIONS


def split_paragraph(text: str) -> list[str]:
    """Rule-based splitter; the returned pieces partition ``text`` modulo whitespace."""
    pieces = []
    start = 0
    for m in _BOUNDARY_RE.finditer(text):
        end = m.end()
        if not _NEXT_START_RE.match(text, end):
            continue
        if m.group().rstrip("\"'”’)]") == "." and _is_abbreviation(text, m.start()):
            continue
        piece = text[start:end].strip()
        if piece:
            pieces.append(piece)
        start = end
    tail = text[start:].strip()
    if tail:
        pieces.append(tail)
    return pieces


def segment_sentences(page: BiographyPage) -> list[Sentence]:
    out = []
    for p_idx, paragraph in enumerate(page.paragraphs):
        for s_idx, piece in enumerate(split_paragraph(paragraph)):
            out.append(Sentence(page.page_id, p_idx, s_idx, piece, tokenize(piece)))
    return out


def filter_target_sentences(sentences: Sequence[Sentence], annotations) -> list[Sentence]:
    """Keep sentences with at least one TIME and one LOCATION span.

    ``annotations`` is aligned with ``sentences`` (a sequence of span lists)
    or a mapping from :attr:`Sentence.key` to span lists; missing entries
    count as having no entities.
    """
    from .extraction import Category

    if isinstance(annotations, dict):
        spans_for = [annotations.get(s.key, ()) for s in sentences]
    else:
        spans_for = list(annotations) + [()] * (len(sentences) - len(annotations))
    kept = []
    for sent, spans in zip(sentences, spans_for):
        cats = {sp.category for sp in spans or ()}
        if Category.TIME in cats and Category.LOCATION in cats:
            kept.append(sent)
    return kept


def paragraph_sentences(page: BiographyPage, paragraph_index: int) -> list[Sentence]:
    return [
        Sentence(page.page_id, paragraph_index, i, piece, tokenize(piece))
        for i, piece in enumerate(split_paragraph(page.paragraphs[paragraph_index]))
    ]
