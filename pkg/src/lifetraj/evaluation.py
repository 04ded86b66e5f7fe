"""Classification metrics and per-page coverage recall."""
from __future__ import annotations

import logging
import statistics
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

THRESHOLD = 0.5


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def count(cls, predictions: Sequence[int], labels: Sequence[int]) -> "Confusion":
        c = cls()
        for p, y in zip(predictions, labels):
            if y == 1:
                if p == 1:
                    c.tp += 1
                else:
                    c.fn += 1
            elif p == 1:
                c.fp += 1
            else:
                c.tn += 1
        return c

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class PageRecall:
    per_page: list[tuple[str, float]]
    avg_recall: float
    recall_std: float
    pooled_recall: float
    excluded: list[str] = field(default_factory=list)


@dataclass
class MetricReport:
    n: int
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    confusion: Confusion
    by_source: dict = field(default_factory=dict)
    per_page: PageRecall | None = None

    def to_json(self) -> dict:
        out = asdict(self)
        if self.per_page is not None:
            out["per_page"]["per_page"] = [{"page_id": p, "recall": r} for p, r in self.per_page.per_page]
        return out


def f1_score(precision: float | None, recall: float | None) -> float | None:
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def compute_metrics(
    predictions: Sequence[int],
    labels: Sequence[int],
    sources: Sequence[str] | None = None,
) -> MetricReport:
    """Binary Acc/P/R/F1. Undefined ratios (zero denominator) come back as ``None``.

    When ``sources`` is given, a sub-report per source is attached; llm-labelled
    subsets carry recall only, since they contain positives exclusively.
    """
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if not labels:
        raise ValueError("no samples to evaluate")
    c = Confusion.count(predictions, labels)
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    report = MetricReport(
        n=c.n,
        accuracy=_ratio(c.tp + c.tn, c.n),
        precision=p,
        recall=r,
        f1=f1_score(p, r),
        confusion=c,
    )
    if sources is not None:
        if len(sources) != len(labels):
            raise ValueError("sources and labels differ in length")
        for src in sorted(set(sources)):
            idx = [i for i, s in enumerate(sources) if s == src]
            sub = Confusion.count([predictions[i] for i in idx], [labels[i] for i in idx])
            sp, sr = _ratio(sub.tp, sub.tp + sub.fp), _ratio(sub.tp, sub.tp + sub.fn)
            if src == "llm":
                report.by_source[src] = {"n": sub.n, "recall": sr}
            else:
                report.by_source[src] = {
                    "n": sub.n,
                    "accuracy": _ratio(sub.tp + sub.tn, sub.n),
                    "precision": sp,
                    "recall": sr,
                    "f1": f1_score(sp, sr),
                }
    return report


def per_page_recall(pages: Mapping[str, Iterable[tuple[int, int]]]) -> PageRecall:
    """Recall within each page from ``(prediction, label)`` pairs.

    Pages with no positive labels are skipped with a warning. The spread is
    the population standard deviation of the page recalls.
    """
    per_page, excluded = [], []
    tp_total = pos_total = 0
    for page_id in sorted(pages):
        pairs = list(pages[page_id])
        pos = sum(1 for _, y in pairs if y == 1)
        if pos == 0:
            logger.warning("page %s has no positive triplets; excluded from recall", page_id)
            excluded.append(page_id)
            continue
        tp = sum(1 for p, y in pairs if y == 1 and p == 1)
        per_page.append((page_id, tp / pos))
        tp_total += tp
        pos_total += pos
    if not per_page:
        raise ValueError("no page has a positive triplet")
    recalls = [r for _, r in per_page]
    return PageRecall(
        per_page=per_page,
        avg_recall=statistics.fmean(recalls),
        recall_std=statistics.pstdev(recalls),
        pooled_recall=tp_total / pos_total,
        excluded=excluded,
    )


def to_predictions(probabilities: Iterable[float], threshold: float = THRESHOLD) -> list[int]:
    return [int(p > threshold) for p in probabilities]
