"""Retrieval metrics and a synthetic manifold benchmark."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import FeatureSet, Ranking

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundTruth:
    """Relevant (and optionally junk) gallery ids per query id."""

    relevant: Mapping[str, frozenset]
    junk: Mapping[str, frozenset] = field(default_factory=dict)

    def __post_init__(self):
        rel = {str(q): frozenset(str(g) for g in ids) for q, ids in self.relevant.items()}
        junk = {str(q): frozenset(str(g) for g in ids) for q, ids in self.junk.items()}
        for q, ids in junk.items():
            overlap = ids & rel.get(q, frozenset())
            if overlap:
                raise ValueError(f"query {q!r}: ids {sorted(overlap)[:3]} are both relevant and junk")
        object.__setattr__(self, "relevant", rel)
        object.__setattr__(self, "junk", junk)

    @classmethod
    def from_labels(cls, ids: Sequence[str], labels: Sequence) -> "GroundTruth":
        """Every other instance with the same label is relevant."""
        groups = {}
        for ident, label in zip(ids, labels):
            groups.setdefault(label, set()).add(str(ident))
        return cls({str(i): frozenset(groups[lab] - {str(i)}) for i, lab in zip(ids, labels)})

    def queries(self) -> list:
        return list(self.relevant)

    def relevant_for(self, query: str) -> frozenset:
        return self.relevant.get(str(query), frozenset())

    def junk_for(self, query: str) -> frozenset:
        return self.junk.get(str(query), frozenset())

    def check_ids(self, known) -> None:
        known = set(known)
        for q in self.relevant:
            for g in self.relevant[q] | self.junk_for(q):
                if g not in known:
                    raise ValueError(f"ground truth for query {q!r} names unknown gallery id {g!r}")


def _hits(ranking: Ranking, truth: GroundTruth) -> np.ndarray:
    """Relevance flags down the ranking, with junk and the query itself removed."""
    junk = truth.junk_for(ranking.query_id) | {ranking.query_id}
    rel = truth.relevant_for(ranking.query_id)
    return np.array([g in rel for g in ranking.ids if g not in junk], dtype=bool)


def average_precision(ranking: Ranking, truth: GroundTruth) -> float:
    """Mean of precision@r over the ranks r of relevant items.

    Relevant items missing from the ranking count as never retrieved.
    Returns nan when the query has no relevant items.
    """
    n_rel = len(truth.relevant_for(ranking.query_id) - {ranking.query_id})
    if n_rel == 0:
        return float("nan")
    hits = _hits(ranking, truth)
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return float(precision.sum() / n_rel)


def recall_at_1(ranking: Ranking, truth: GroundTruth) -> float:
    """1.0 if the first non-junk, non-self item is relevant, else 0.0 (nan without relevant items)."""
    if not truth.relevant_for(ranking.query_id) - {ranking.query_id}:
        return float("nan")
    hits = _hits(ranking, truth)
    return float(hits[0]) if hits.size else 0.0


@dataclass(frozen=True)
class MetricReport:
    mAP: float
    recall_at_1: float
    per_query_ap: dict
    skipped: tuple = ()

    @property
    def n_queries(self) -> int:
        return len(self.per_query_ap)

    def lines(self) -> list:
        return [f"mAP={self.mAP:.4f}", f"R@1={self.recall_at_1:.4f}", f"queries={self.n_queries}"]


def evaluate(rankings: Sequence[Ranking], truth: GroundTruth) -> MetricReport:
    """mAP and Recall@1 over all queries with at least one relevant item."""
    aps, r1, skipped = {}, [], []
    for ranking in rankings:
        ap = average_precision(ranking, truth)
        if np.isnan(ap):
            skipped.append(ranking.query_id)
            continue
        aps[ranking.query_id] = ap
        r1.append(recall_at_1(ranking, truth))
    if skipped:
        log.warning("%d queries without relevant items excluded from the metrics", len(skipped))
    if not aps:
        raise ValueError("no query has any relevant item")
    return MetricReport(mAP=float(np.mean(list(aps.values()))), recall_at_1=float(np.mean(r1)),
                        per_query_ap=aps, skipped=tuple(skipped))


def generate_manifold(seed: int = 0, n_per_cluster: int = 100, clusters: int = 3,
                      noise: float = 0.05) -> tuple:
    """Interlocking twisted half-circle arcs in 3-D, one label per arc.

    Arc ``c`` is a unit half circle centred at ``x = c``; consecutive arcs
    open in opposite directions and are offset so their ends reach into the
    neighboring arc's hollow, and each arc twists out of the plane along
    ``z``. The ends of one arc are closer to the middle of its neighbor than
    to its own far end, so Euclidean rankings mix labels while neighbors
    along an arc share its label. Same arguments give bitwise-identical
    output.
    """
    if clusters < 1 or n_per_cluster < 1:
        raise ValueError("need clusters >= 1 and n_per_cluster >= 1")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    offset, twist = 0.5, 1.5
    points, labels = [], []
    for c in range(clusters):
        t = np.sort(rng.uniform(0.0, np.pi, n_per_cluster))
        sign = 1.0 if c % 2 == 0 else -1.0
        xyz = np.column_stack([c + np.cos(t), sign * np.sin(t) + offset * (c % 2),
                               sign * twist * np.sin(2 * t)])
        points.append(xyz + noise * rng.standard_normal(xyz.shape))
        labels.append(np.full(n_per_cluster, c))
    data = np.vstack(points)
    labels = np.concatenate(labels)
    width = len(str(len(data) - 1))
    ids = [f"p{i:0{width}d}" for i in range(len(data))]
    return FeatureSet(tuple(ids), data), GroundTruth.from_labels(ids, labels)
