"""Co-location interaction network, PageRank and cumulative year snapshots."""
from __future__ import annotations

import itertools
import re
import unicodedata
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .trajectory import TrajectoryRecord

INSTITUTION_KEYWORDS = ("University", "College", "Institute", "School", "Academy")
_PUNCT_RE = re.compile(r"[^\w\s]")


def normalize_location(text: str) -> str:
    text = unicodedata.normalize("NFC", text).casefold()
    return " ".join(_PUNCT_RE.sub(" ", text).split())


def has_keyword(location: str, keywords: Sequence[str] = INSTITUTION_KEYWORDS) -> bool:
    words = set(normalize_location(location).split())
    return any(k.casefold() in words for k in keywords)


@dataclass(frozen=True, order=True)
class Edge:
    source: str
    target: str
    year: int
    location: str

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("self-loop")
        if self.source > self.target:
            # undirected: keep endpoints in canonical order
            a, b = self.target, self.source
            object.__setattr__(self, "source", a)
            object.__setattr__(self, "target", b)


@dataclass
class InteractionGraph:
    nodes: dict[str, dict] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)

    def add_edge(self, edge: Edge):
        self.nodes.setdefault(edge.source, {})
        self.nodes.setdefault(edge.target, {})
        self.edges.append(edge)

    def to_node_link(self) -> dict:
        return {
            "nodes": [{"id": n, **attrs} for n, attrs in sorted(self.nodes.items())],
            "edges": [
                {"source": e.source, "target": e.target, "year": e.year, "location": e.location}
                for e in self.edges
            ],
        }

    @classmethod
    def from_node_link(cls, data: dict) -> "InteractionGraph":
        g = cls()
        for node in data.get("nodes", []):
            attrs = {k: v for k, v in node.items() if k != "id"}
            g.nodes[node["id"]] = attrs
        for e in data.get("edges", []):
            g.add_edge(Edge(e["source"], e["target"], int(e["year"]), e["location"]))
        return g


def build_interaction_network(
    records: Iterable[TrajectoryRecord], keywords: Sequence[str] = INSTITUTION_KEYWORDS
) -> InteractionGraph:
    """Link two people who were at the same institution in the same year.

    Locations match on their normalised text. One edge per (pair, year,
    location); only people with at least one edge become nodes.
    """
    groups: dict[tuple[int, str], set[str]] = defaultdict(set)
    for r in records:
        loc = normalize_location(r.location_text)
        if loc and has_keyword(loc, keywords):
            groups[(r.year, loc)].add(r.person_id)
    graph = InteractionGraph()
    for (year, loc), people in sorted(groups.items()):
        for a, b in itertools.combinations(sorted(people), 2):
            graph.add_edge(Edge(a, b, year, loc))
    return graph


def pagerank(graph: InteractionGraph, damping: float = 0.85, tol: float = 1e-8, max_iter: int = 1000) -> dict[str, float]:
    """Power-iteration PageRank; parallel edges add weight, isolated nodes spread rank uniformly."""
    ids = sorted(graph.nodes)
    n = len(ids)
    if n == 0:
        raise ValueError("empty graph")
    index = {v: i for i, v in enumerate(ids)}
    w = np.zeros((n, n))
    for e in graph.edges:
        i, j = index[e.source], index[e.target]
        w[i, j] += 1.0
        w[j, i] += 1.0
    out_weight = w.sum(axis=1)
    dangling = out_weight == 0
    transition = np.divide(w, out_weight[:, None], out=np.zeros_like(w), where=~dangling[:, None])
    rank = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        new = damping * (rank @ transition + rank[dangling].sum() / n) + (1.0 - damping) / n
        delta = np.abs(new - rank).sum()
        rank = new
        if delta < tol:
            break
    rank /= rank.sum()
    return {v: float(rank[index[v]]) for v in ids}


def snapshot(graph: InteractionGraph, year: int) -> InteractionGraph:
    """Edges up to and including ``year`` and their endpoints."""
    sub = InteractionGraph()
    for e in graph.edges:
        if e.year <= year:
            sub.add_edge(e)
    for node in sub.nodes:
        sub.nodes[node] = dict(graph.nodes.get(node, {}))
    return sub


def snapshots(graph: InteractionGraph, years: Iterable[int]) -> dict[int, InteractionGraph]:
    return {y: snapshot(graph, y) for y in years}


def parse_year_range(spec: str) -> list[int]:
    """``"1910:2020:10"`` -> 1910, 1920, ..., 2020 (inclusive end)."""
    parts = [int(p) for p in spec.split(":")]
    if len(parts) == 1:
        return parts
    if len(parts) not in (2, 3):
        raise ValueError(f"bad year range {spec!r}")
    start, stop = parts[0], parts[1]
    step = parts[2] if len(parts) == 3 else 10
    if step <= 0 or stop < start:
        raise ValueError(f"bad year range {spec!r}")
    return list(range(start, stop + 1, step))
