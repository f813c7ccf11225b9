"""Lexical fuzzy matching: BM25 candidate prefilter + exact edit rescoring.

Two search modes share one engine. Exact mode (``prefilter_n=None``) scores
every collection segment with the edit similarity, guaranteeing the true
top-k; prefiltered mode rescores only the BM25 top ``prefilter_n``
candidates, trading a small recall risk for a large speedup. The three
query flavors used in practice (matching source text against stored
sources, reference targets against a target pool, or source text against
back-translated pool text) differ only in what is indexed and what is
passed as the query.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bm25 import Bm25Index, bm25_top_rows, build_bm25
from .corpus import Segment
from .text import levenshtein_similarity


@dataclass
class FuzzyMatchResult:
    """Hits for one query, sorted by similarity descending, ties by ascending id."""

    query_id: int
    hits: list[tuple[int, float]]

    def best(self) -> tuple[int, float] | None:
        return self.hits[0] if self.hits else None


def fuzzy_match(
    index: Bm25Index,
    collection: Sequence[Segment],
    query: Segment,
    k: int = 3,
    prefilter_n: int | None = None,
    threshold: float = 0.0,
    exclude_self: bool = False,
) -> FuzzyMatchResult:
    """Retrieve the ``k`` most edit-similar collection segments for ``query``.

    ``exclude_self`` drops hits whose segment id equals the query id; set it
    when the query is itself a member of the indexed collection. Hits with
    similarity strictly below ``threshold`` are dropped, so fewer than ``k``
    results (or none) may be returned.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if len(collection) != index.n_docs:
        raise ValueError(
            f"collection size {len(collection)} does not match index size {index.n_docs}"
        )
    if prefilter_n is None:
        rows: Iterable[int] = range(index.n_docs)
    else:
        rows = bm25_top_rows(index, query.tokens, prefilter_n)
    qtokens = query.tokens
    qid = query.id
    scored: list[tuple[float, int]] = []
    for row in rows:
        seg = collection[row]
        if exclude_self and seg.id == qid:
            continue
        lev = levenshtein_similarity(qtokens, seg.tokens)
        if lev >= threshold:
            scored.append((-lev, seg.id))
    scored.sort()
    return FuzzyMatchResult(query_id=qid, hits=[(sid, -neg) for neg, sid in scored[:k]])


class FuzzyMatcher(BaseEstimator):
    """Translation-memory fuzzy matcher with a scikit-learn flavored API.

    Parameters
    ----------
    k1, b:
        BM25 shape parameters for the candidate prefilter.
    prefilter_n:
        Number of BM25 candidates rescored per query; ``None`` rescans the
        whole collection (exact mode).
    threshold:
        Minimum edit similarity a hit must reach to be returned.
    """

    def __init__(
        self,
        k1: float = 1.2,
        b: float = 0.75,
        prefilter_n: int | None = 100,
        threshold: float = 0.0,
    ):
        self.k1 = k1
        self.b = b
        self.prefilter_n = prefilter_n
        self.threshold = threshold

    def fit(self, segments: Sequence[Segment], y=None) -> "FuzzyMatcher":
        """Index a segment collection."""
        self.segments_ = list(segments)
        self.index_ = build_bm25(self.segments_, k1=self.k1, b=self.b)
        return self

    def kneighbors(
        self,
        queries: Sequence[Segment],
        k: int = 3,
        exclude_self: bool = False,
    ) -> list[FuzzyMatchResult]:
        check_is_fitted(self, "index_")
        return [
            fuzzy_match(
                self.index_,
                self.segments_,
                q,
                k=k,
                prefilter_n=self.prefilter_n,
                threshold=self.threshold,
                exclude_self=exclude_self,
            )
            for q in queries
        ]

    def best_scores(self, queries: Sequence[Segment], exclude_self: bool = False) -> np.ndarray:
        """Best-match similarity per query, ignoring the threshold (NaN if no hit)."""
        check_is_fitted(self, "index_")
        out = np.full(len(queries), np.nan)
        for i, q in enumerate(queries):
            result = fuzzy_match(
                self.index_,
                self.segments_,
                q,
                k=1,
                prefilter_n=self.prefilter_n,
                threshold=0.0,
                exclude_self=exclude_self,
            )
            if result.hits:
                out[i] = result.hits[0][1]
        return out
