"""Turning accepted triplets into normalised trajectory records."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from ..extraction import PERSONAL_PRONOUNS
from ..ingest import tokenize

logger = logging.getLogger(__name__)

OTHER_TYPE = "other*"
_YEAR_RE = re.compile(r"(?<!\d)(\d{4})(?!\d)")
MIN_YEAR, MAX_YEAR = 1, 2100


@dataclass(frozen=True)
class TrajectoryRecord:
    person_id: str
    year: int
    location_text: str
    latitude: float | None = None
    longitude: float | None = None
    verb_lemma: str = ""
    verb_type: str = OTHER_TYPE
    page_id: str = ""

    def __post_init__(self):
        if not MIN_YEAR <= self.year <= MAX_YEAR:
            raise ValueError(f"year {self.year} out of range")
        if self.latitude is not None and not -90 <= self.latitude <= 90:
            raise ValueError(f"latitude {self.latitude} out of range")
        if self.longitude is not None and not -180 <= self.longitude <= 180:
            raise ValueError(f"longitude {self.longitude} out of range")

    def to_json(self) -> dict:
        return asdict(self)


def _name_tokens(name: str) -> set[str]:
    return {t.casefold() for t in tokenize(name) if t.isalnum()}


def resolve_person(mention: str, title: str, known_names: Sequence[str] = ()) -> str:
    """Map a person mention to a canonical name.

    Pronouns and partial forms of the page subject resolve to ``title``; a
    partial form matching exactly one other known full name resolves to it.
    Anything else keeps its surface form.
    """
    surface = " ".join(mention.split())
    if surface.casefold() in PERSONAL_PRONOUNS:
        return title
    tokens = _name_tokens(surface)
    if not tokens:
        return surface
    if tokens <= _name_tokens(title):
        return title
    hits = [n for n in dict.fromkeys(known_names) if n != title and tokens <= _name_tokens(n)]
    if len(hits) == 1:
        return hits[0]
    return surface


def normalize_time(text: str) -> int | None:
    """First plausible four-digit year in the expression; ranges yield their start."""
    for m in _YEAR_RE.finditer(text):
        year = int(m.group(1))
        if MIN_YEAR <= year <= MAX_YEAR:
            return year
    return None


def load_verb_map(path: str | Path | None = None) -> dict[str, str]:
    """Verb lemma to type mapping. ``None`` loads the bundled starter map."""
    if path is None:
        text = resources.files("lifetraj").joinpath("data/verb_types.json").read_text(encoding="utf-8")
        return json.loads(text)
    path = Path(path)
    if not path.exists():
        logger.warning("verb map %s not found; every verb counts as %s", path, OTHER_TYPE)
        return {}
    return {k.casefold(): v for k, v in json.loads(path.read_text(encoding="utf-8")).items()}


def _text(value) -> str:
    if value is None:
        return ""
    return value.get("text", "") if isinstance(value, dict) else str(value)


def verb_lemma(value) -> str:
    if isinstance(value, dict):
        return (value.get("lemma") or value.get("text") or "").casefold()
    return _text(value).casefold()


def build_records(
    rows: Iterable[dict],
    titles: Mapping[str, str],
    verb_map: Mapping[str, str],
    geocoder=None,
    stats: Counter | None = None,
) -> list[TrajectoryRecord]:
    """Normalise accepted triplet rows; rows with vague times are dropped and counted."""
    stats = stats if stats is not None else Counter()
    known = sorted(set(titles.values()))
    out = []
    for row in rows:
        page_id = str(row.get("page_id", ""))
        title = titles.get(page_id) or row.get("title") or page_id
        year = normalize_time(_text(row["time"]))
        if year is None:
            stats["vague_time"] += 1
            continue
        location = " ".join(_text(row["location"]).split())
        lat = lon = None
        if geocoder is not None:
            coords = geocoder.geocode(location)
            if coords is None:
                stats["not_geocoded"] += 1
            else:
                lat, lon = coords
        lemma = verb_lemma(row.get("verb"))
        out.append(TrajectoryRecord(
            person_id=resolve_person(_text(row["person"]), title, known),
            year=year,
            location_text=location,
            latitude=lat,
            longitude=lon,
            verb_lemma=lemma,
            verb_type=verb_map.get(lemma, OTHER_TYPE),
            page_id=page_id,
        ))
        stats["kept"] += 1
    return out


def verb_histogram(records: Iterable[TrajectoryRecord], verb_map: Mapping[str, str] | None = None,
                   top_k: int | None = None) -> list[tuple[str, int]]:
    """Counts per verb type, most frequent first, ties broken by name.

    With ``verb_map`` the types are recomputed from each record's lemma.
    """
    counts = Counter(
        (verb_map.get(r.verb_lemma, OTHER_TYPE) if verb_map is not None else r.verb_type)
        for r in records
    )
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:top_k] if top_k is not None else ranked
