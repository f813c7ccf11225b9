"""Retrieval-quality metrics and aggregate reports.

Conventions: the mean best-match similarity averages only over queries
that retrieved something, so it reflects match quality rather than
coverage; coverage is reported separately as the retrieval rate. Scores
are kept in [0, 1]; the alignment error is a percentage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .corpus import ParallelCorpus, Segment
from .encoder import EncoderParams, encode_batch
from .text import levenshtein_similarity


def ndcg(gains: Sequence[float]) -> float:
    """Normalized discounted cumulative gain of gains in model-ranked order.

    Discount is log2(rank + 1) with 1-based ranks. A ranking whose gains
    are all zero has nothing to order and scores 1.0 by convention.
    """
    gains = list(gains)
    if not gains or all(g == 0 for g in gains):
        return 1.0
    discounts = [1.0 / math.log2(r + 2) for r in range(len(gains))]
    dcg = sum(g * d for g, d in zip(gains, discounts))
    idcg = sum(g * d for g, d in zip(sorted(gains, reverse=True), discounts))
    return dcg / idcg


def lev_at_1(
    per_query_best: Sequence[Segment | None],
    references: Sequence[Segment],
) -> float | None:
    """Mean edit similarity between each reference and its best retrieved match.

    Queries with no hit are left out of the average; returns None when no
    query retrieved anything (absent, never 0).
    """
    if len(per_query_best) != len(references):
        raise ValueError("one best-match entry per reference required")
    values = [
        levenshtein_similarity(ref.tokens, best.tokens)
        for best, ref in zip(per_query_best, references)
        if best is not None
    ]
    if not values:
        return None
    return float(np.mean(values))


def xsim_error(params: EncoderParams, parallel_eval: ParallelCorpus) -> float:
    """Percentage of sources whose nearest eval-set target is not their own.

    Nearest is by cosine over the eval set's targets; ties resolve to the
    lowest target index.
    """
    n = len(parallel_eval)
    if n < 2:
        raise ValueError(f"alignment error needs at least 2 pairs, got {n}")
    ex = encode_batch(params, parallel_eval.sources)
    ey = encode_batch(params, parallel_eval.targets)
    nearest = np.argmax(ex @ ey.T, axis=1)  # first index wins ties
    return 100.0 * float(np.mean(nearest != np.arange(n)))


@dataclass
class RetrievalReport:
    """Per-query and aggregate retrieval quality."""

    n_queries: int
    retrieval_rate: float
    mean_lev_at_1: float | None
    mean_ndcg: float | None
    xsim_error: float | None
    per_query_lev: list[float | None]

    def to_dict(self) -> dict:
        return asdict(self)


def build_report(
    hits_per_query: Sequence[Sequence[tuple[int, float]]],
    references: Sequence[Segment],
    pool_by_id: dict[int, Segment],
    encoder: EncoderParams | None = None,
    parallel_eval: ParallelCorpus | None = None,
) -> RetrievalReport:
    """Aggregate hits into a report.

    Ranking quality (NDCG) is computed per query from the edit similarity
    of each returned hit to the reference, in returned order; the alignment
    error is filled in only when an encoder is supplied.
    """
    if len(hits_per_query) != len(references):
        raise ValueError("one hit list per reference required")
    per_query_lev: list[float | None] = []
    ndcgs = []
    for hits, ref in zip(hits_per_query, references):
        if not hits:
            per_query_lev.append(None)
            continue
        gains = [
            levenshtein_similarity(ref.tokens, pool_by_id[sid].tokens) for sid, _ in hits
        ]
        per_query_lev.append(gains[0])
        ndcgs.append(ndcg(gains))
    retrieved = [v for v in per_query_lev if v is not None]
    rate = len(retrieved) / len(references) if references else 0.0
    return RetrievalReport(
        n_queries=len(references),
        retrieval_rate=rate,
        mean_lev_at_1=float(np.mean(retrieved)) if retrieved else None,
        mean_ndcg=float(np.mean(ndcgs)) if ndcgs else None,
        xsim_error=(
            xsim_error(encoder, parallel_eval)
            if encoder is not None and parallel_eval is not None
            else None
        ),
        per_query_lev=per_query_lev,
    )
