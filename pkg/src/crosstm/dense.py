"""Exact top-k cosine retrieval over encoded segment pools.

Search is a flat inner-product scan: every query is scored against every
stored vector (rows are unit-normalized, so the inner product is the
cosine). No approximate structure is used; approximation could miss the
true nearest neighbors, and exactness is what the brute-force oracle tests
pin down.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._binio import check_magic, read_exact, read_u32, read_u64, write_u32, write_u64
from .corpus import Segment
from .encoder import EncoderParams, encode_batch

MAGIC = b"XTMVIDX\x00"
VERSION = 1


@dataclass
class VectorIndex:
    """Unit-normalized embedding matrix with a row-to-segment-id mapping."""

    ids: np.ndarray      # (N,) segment ids
    vectors: np.ndarray  # (N, d), rows unit-normalized

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


def build_index(params: EncoderParams, pool: Sequence[Segment]) -> VectorIndex:
    """Encode every pool segment into one index row."""
    segments = list(pool)
    if not segments:
        raise ValueError("cannot build a vector index over an empty pool")
    vectors = encode_batch(params, segments)
    ids = np.array([s.id for s in segments], dtype=np.int64)
    return VectorIndex(ids=ids, vectors=vectors)


def knn(
    index: VectorIndex,
    query_vec: np.ndarray,
    k: int = 3,
    threshold: float = -1.0,
) -> list[tuple[int, float]]:
    """Top-``k`` rows by cosine, descending, ties by ascending segment id.

    Entries with cosine below ``threshold`` are dropped, so fewer than ``k``
    results may be returned.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if query_vec.shape != (index.dim,):
        raise ValueError(
            f"query dimension {query_vec.shape} does not match index dimension ({index.dim},)"
        )
    scores = index.vectors @ query_vec
    order = np.lexsort((index.ids, -scores))[:k]
    return [
        (int(index.ids[r]), float(scores[r])) for r in order if scores[r] >= threshold
    ]


def knn_batch(
    index: VectorIndex,
    queries: np.ndarray,
    k: int = 3,
    threshold: float = -1.0,
    exclude_ids: Sequence[int] | None = None,
) -> list[list[tuple[int, float]]]:
    """Vectorized :func:`knn` over query rows.

    ``exclude_ids`` drops, per query, the hit whose segment id matches
    (used when a query is itself a member of the pool).
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != index.dim:
        raise ValueError(
            f"query matrix shape {queries.shape} does not match index dimension {index.dim}"
        )
    scores = queries @ index.vectors.T
    out = []
    for i in range(len(queries)):
        row = scores[i]
        order = np.lexsort((index.ids, -row))
        hits = []
        for r in order:
            sid = int(index.ids[r])
            if exclude_ids is not None and sid == exclude_ids[i]:
                continue
            if row[r] < threshold:
                break  # sorted descending; nothing further qualifies
            hits.append((sid, float(row[r])))
            if len(hits) == k:
                break
        out.append(hits)
    return out


def save_index(index: VectorIndex, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        write_u32(fh, VERSION)
        write_u64(fh, len(index))
        write_u32(fh, index.dim)
        fh.write(np.ascontiguousarray(index.ids, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())


def load_index(path: str | Path) -> VectorIndex:
    with open(path, "rb") as fh:
        check_magic(fh, MAGIC, VERSION, "vector index")
        n = read_u64(fh)
        d = read_u32(fh)
        ids = np.frombuffer(read_exact(fh, 8 * n), dtype="<i8").copy()
        vectors = (
            np.frombuffer(read_exact(fh, 4 * n * d), dtype="<f4")
            .astype(np.float64)
            .reshape(n, d)
        )
    return VectorIndex(ids=ids, vectors=vectors)


class DenseRetriever(BaseEstimator):
    """Cross-lingual dense retriever: encode a pool, search it by cosine.

    Parameters
    ----------
    encoder:
        Trained :class:`EncoderParams` shared by queries and pool.
    threshold:
        Minimum cosine a hit must reach.
    """

    def __init__(self, encoder: EncoderParams, threshold: float = -1.0):
        self.encoder = encoder
        self.threshold = threshold

    def fit(self, segments: Sequence[Segment], y=None) -> "DenseRetriever":
        self.index_ = build_index(self.encoder, segments)
        return self

    def kneighbors(
        self,
        queries: Sequence[Segment],
        k: int = 3,
        exclude_self: bool = False,
    ) -> list[list[tuple[int, float]]]:
        check_is_fitted(self, "index_")
        q = encode_batch(self.encoder, queries)
        exclude = [s.id for s in queries] if exclude_self else None
        return knn_batch(self.index_, q, k=k, threshold=self.threshold, exclude_ids=exclude)

    def best_scores(self, queries: Sequence[Segment], exclude_self: bool = False) -> np.ndarray:
        """Best cosine per query, ignoring the threshold (NaN if pool exhausted)."""
        check_is_fitted(self, "index_")
        q = encode_batch(self.encoder, queries)
        exclude = [s.id for s in queries] if exclude_self else None
        hits = knn_batch(self.index_, q, k=1, threshold=-np.inf, exclude_ids=exclude)
        return np.array([h[0][1] if h else np.nan for h in hits])
