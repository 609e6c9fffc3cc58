"""Recall@k and MRR@k over ranked retrieval results.

Queries without gold pages are left out of both denominators; use
``split_judged`` to see how many were excluded.
"""

from __future__ import annotations

from typing import Mapping, Sequence

from lingflow.retrieval.index import RetrievalResult


def split_judged(
    results: Sequence[RetrievalResult], golds: Mapping[str, set[str] | frozenset[str]]
) -> tuple[list[RetrievalResult], int]:
    judged = [r for r in results if golds.get(r.query_id)]
    return judged, len(results) - len(judged)


def recall_at_k(results, golds, k: int) -> float:
    judged, _ = split_judged(results, golds)
    if not judged:
        raise ValueError("no query has gold pages")
    hits = sum(1 for r in judged if set(r.page_ids[:k]) & set(golds[r.query_id]))
    return hits / len(judged)


def reciprocal_rank(ranked_ids: Sequence[str], gold: set[str] | frozenset[str], k: int) -> float:
    for rank, pid in enumerate(ranked_ids[:k], 1):
        if pid in gold:
            return 1.0 / rank
    return 0.0


def mrr_at_k(results, golds, k: int = 5) -> float:
    judged, _ = split_judged(results, golds)
    if not judged:
        raise ValueError("no query has gold pages")
    return sum(reciprocal_rank(r.page_ids, golds[r.query_id], k) for r in judged) / len(judged)
