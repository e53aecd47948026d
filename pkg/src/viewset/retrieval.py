"""Classification-driven retrieval: rank lists, re-ranking, metrics.

A query's first-stage list (L1) contains the corpus shapes whose
predicted class matches the query's predicted class, ordered by that
class's probability. The second stage (L2) stably partitions L1 so that
shapes sharing the query's predicted subcategory come first, preserving
relative order inside both partitions.

Scoring follows the usual retrieval battery: a retrieved shape is
relevant iff its ground-truth category equals the query's. Metrics are
averaged per query ("micro") and per category of the query ("macro").
NDCG uses binary gains with a 1/log2(rank+1) discount starting at rank 1
and is normalized by the ideal ordering of the whole corpus truncated to
the 1000-entry list cap.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Prediction

log = logging.getLogger(__name__)

MAX_RANK = 1000
METRIC_NAMES = ("p_at_n", "r_at_n", "f1_at_n", "map", "ndcg")


@dataclass
class RankList:
    query_id: str
    entries: list[tuple[str, float]]  # (shape_id, score), best first
    stage: str = "L1"

    @property
    def ids(self) -> list[str]:
        return [shape_id for shape_id, _ in self.entries]


@dataclass
class GroundTruth:
    category: dict[str, int]
    subcategory: dict[str, int] = field(default_factory=dict)

    def category_of(self, shape_id: str) -> int:
        if shape_id not in self.category:
            raise KeyError(f"shape {shape_id} missing from ground truth")
        return self.category[shape_id]


@dataclass
class QueryScore:
    query_id: str
    category: int
    p_at_n: float
    r_at_n: float
    f1_at_n: float
    map: float
    ndcg: float


@dataclass
class MetricsReport:
    micro: dict[str, float]
    macro: dict[str, float]


def build_l1(query_id: str, query_pred: Prediction,
             corpus: list[tuple[str, Prediction]]) -> RankList:
    """Same-predicted-class shapes ordered by class probability.

    Probability ties break by ascending shape id; the query never
    appears in its own list; at most MAX_RANK entries are kept.
    """
    cls = query_pred.predicted_class
    matches = [(shape_id, float(pred.probabilities[cls]))
               for shape_id, pred in corpus
               if shape_id != query_id and pred.predicted_class == cls]
    matches.sort(key=lambda item: (-item[1], item[0]))
    return RankList(query_id=query_id, entries=matches[:MAX_RANK], stage="L1")


def rerank_l2(l1: RankList, query_sub: int,
              sub_predictions: dict[str, int]) -> RankList:
    """Stable partition of L1: query-subcategory matches first."""
    front, back = [], []
    for shape_id, score in l1.entries:
        if shape_id not in sub_predictions:
            log.warning("no subcategory prediction for %s; treated as "
                        "non-matching", shape_id)
            back.append((shape_id, score))
        elif sub_predictions[shape_id] == query_sub:
            front.append((shape_id, score))
        else:
            back.append((shape_id, score))
    return RankList(query_id=l1.query_id, entries=front + back, stage="L2")


def score_query(rank: RankList, gt: GroundTruth) -> QueryScore:
    """P@N, R@N, F1@N, AP and NDCG for one query's rank list."""
    query_cat = gt.category_of(rank.query_id)
    total_relevant = sum(1 for shape_id, cat in gt.category.items()
                         if cat == query_cat and shape_id != rank.query_id)
    if total_relevant == 0:
        log.warning("query %s: no other shape of its category in the corpus",
                    rank.query_id)

    relevance = [1 if gt.category_of(shape_id) == query_cat else 0
                 for shape_id in rank.ids]
    n = len(relevance)
    hits = sum(relevance)

    p = hits / n if n else 0.0
    r = hits / total_relevant if total_relevant else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0

    ap = 0.0
    if total_relevant:
        seen = 0
        for k, rel in enumerate(relevance, start=1):
            if rel:
                seen += 1
                ap += seen / k
        ap /= total_relevant

    dcg = 0.0
    for k, rel in enumerate(relevance, start=1):
        dcg += rel / math.log2(k + 1)
    ideal = 0.0
    for k in range(1, min(total_relevant, MAX_RANK) + 1):
        ideal += 1.0 / math.log2(k + 1)
    ndcg = dcg / ideal if ideal > 0 else 0.0

    return QueryScore(query_id=rank.query_id, category=query_cat,
                      p_at_n=p, r_at_n=r, f1_at_n=f1, map=ap, ndcg=ndcg)


def aggregate(scores: list[QueryScore]) -> MetricsReport:
    """Micro: mean over queries. Macro: mean over per-category means."""
    if not scores:
        raise ValueError("cannot aggregate zero query scores")
    micro = {name: float(np.mean([getattr(s, name) for s in scores]))
             for name in METRIC_NAMES}
    by_cat: dict[int, list[QueryScore]] = {}
    for s in scores:
        by_cat.setdefault(s.category, []).append(s)
    macro = {}
    for name in METRIC_NAMES:
        cat_means = [float(np.mean([getattr(s, name) for s in group]))
                     for group in by_cat.values()]
        macro[name] = float(np.mean(cat_means))
    return MetricsReport(micro=micro, macro=macro)


# ---------------------------------------------------------------- reporting

def write_rank_file(path, ranks: list[RankList]) -> None:
    """One line per query: query id, then retrieved ids in rank order."""
    with open(path, "w", encoding="utf-8") as fh:
        for rank in ranks:
            fh.write(" ".join([rank.query_id] + rank.ids) + "\n")


DISPLAY_NAMES = {"p_at_n": "P@N", "r_at_n": "R@N", "f1_at_n": "F1@N",
                 "map": "mAP", "ndcg": "NDCG"}


def format_table(report: MetricsReport) -> str:
    header = ["", *[DISPLAY_NAMES[n] for n in METRIC_NAMES]]
    rows = [["micro"] + [f"{report.micro[n]:.4f}" for n in METRIC_NAMES],
            ["macro"] + [f"{report.macro[n]:.4f}" for n in METRIC_NAMES]]
    widths = [max(len(row[j]) for row in [header] + rows)
              for j in range(len(header))]
    lines = []
    for row in [header] + rows:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def format_key_values(report: MetricsReport) -> str:
    lines = []
    for block, values in (("micro", report.micro), ("macro", report.macro)):
        for name in METRIC_NAMES:
            lines.append(f"{block}.{name}\t{values[name]:.6f}")
    return "\n".join(lines)
