"""Recall@k and mean reciprocal rank over full cross-modal rankings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from temde.errors import ContractError

KS = (1, 5, 10)


@dataclass(frozen=True)
class RankingResult:
    query_id: int
    ranking: np.ndarray  # gallery ids, best first
    relevant: frozenset[int]

    @property
    def best_rank(self) -> int:
        """1-based rank of the highest-placed relevant item."""
        hits = np.flatnonzero(np.isin(self.ranking, list(self.relevant)))
        return int(hits[0]) + 1


def rank_all(scores, relevance: Mapping[int, Iterable[int]] | Iterable[tuple[int, int]]) -> list[RankingResult]:
    """Rank every gallery column for every query row, descending.

    Ties go to the lower gallery id. ``relevance`` is either a mapping from
    query id to relevant gallery ids or an iterable of ``(query, gallery)``
    pairs.
    """
    scores = np.asarray(getattr(scores, "data", scores))
    if scores.ndim != 2:
        raise ContractError(f"score matrix must be 2-D, got shape {scores.shape}")
    if isinstance(relevance, Mapping):
        rel = {int(q): frozenset(int(g) for g in gs) for q, gs in relevance.items()}
    else:
        pairs: dict[int, set[int]] = {}
        for q, g in relevance:
            pairs.setdefault(int(q), set()).add(int(g))
        rel = {q: frozenset(gs) for q, gs in pairs.items()}
    results = []
    for q in range(scores.shape[0]):
        if not rel.get(q):
            raise ContractError(f"query {q} has no relevant gallery item")
        # stable sort on negated scores keeps ascending ids among ties
        order = np.argsort(-scores[q], kind="stable")
        results.append(RankingResult(q, order, rel[q]))
    return results


def recall_at_k(results: Sequence[RankingResult], k: int) -> float:
    if not results:
        raise ContractError("no ranking results")
    gallery = len(results[0].ranking)
    if not 1 <= k <= gallery:
        raise ContractError(f"k={k} outside [1, {gallery}]")
    return sum(r.best_rank <= k for r in results) / len(results)


def mrr(results: Sequence[RankingResult]) -> float:
    if not results:
        raise ContractError("no ranking results")
    return sum(1.0 / r.best_rank for r in results) / len(results)


@dataclass
class RetrievalMetrics:
    r1: float
    r5: float
    r10: float
    mrr: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.r1, self.r5, self.r10, self.mrr

    @classmethod
    def mean(cls, items: Sequence[RetrievalMetrics]) -> RetrievalMetrics:
        return cls(*np.mean([m.as_tuple() for m in items], axis=0).tolist())


def summarize(results: Sequence[RankingResult]) -> RetrievalMetrics:
    gallery = len(results[0].ranking)
    r1, r5, r10 = (recall_at_k(results, min(k, gallery)) for k in KS)
    return RetrievalMetrics(r1, r5, r10, mrr(results))


def paired_retrieval(scores: np.ndarray) -> dict[str, RetrievalMetrics]:
    """Both retrieval directions for a square caption x image matrix whose diagonal matches.

    ``image_retrieval`` ranks images per caption; ``text_retrieval`` ranks
    captions per image.
    """
    scores = np.asarray(scores)
    diag = {i: (i,) for i in range(scores.shape[0])}
    return {
        "text_retrieval": summarize(rank_all(scores.T, diag)),
        "image_retrieval": summarize(rank_all(scores, diag)),
    }


def format_metric_line(step: int, loss: float, m: RetrievalMetrics) -> str:
    return f"{step}\t{loss:.6f}\t{m.r1:.6f}\t{m.r5:.6f}\t{m.r10:.6f}\t{m.mrr:.6f}"
