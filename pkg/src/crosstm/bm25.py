"""BM25 inverted index over tokenized segments.

Scoring uses the non-negative idf variant

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))

and the usual saturation / length normalization

    score(q, d) = sum over tokens t of q of
        idf(t) * tf(t, d) * (k1 + 1) / (tf(t, d) + k1 * (1 - b + b * |d| / avg_len))

Repeated query tokens contribute once per occurrence. Documents sharing no
token with the query never appear in results.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import (
    check_magic,
    read_str,
    read_u32,
    read_u64,
    read_f64,
    read_varint,
    write_str,
    write_u32,
    write_u64,
    write_f64,
    write_varint,
)
from .corpus import Segment

MAGIC = b"XTMBM25\x00"
VERSION = 1


@dataclass
class Bm25Index:
    """Inverted index: rows are collection positions, ``ids`` maps to segment ids."""

    postings: dict[str, tuple[np.ndarray, np.ndarray]]  # token -> (rows, tfs)
    doc_len: np.ndarray
    ids: np.ndarray
    avg_len: float
    k1: float
    b: float

    @property
    def n_docs(self) -> int:
        return len(self.doc_len)

    def idf(self, token: str) -> float:
        entry = self.postings.get(token)
        df = 0 if entry is None else len(entry[0])
        n = self.n_docs
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def build_bm25(collection: Sequence[Segment], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    """Index a non-empty segment collection."""
    if len(collection) == 0:
        raise ValueError("cannot build a BM25 index over an empty collection")
    rows_by_token: dict[str, list[int]] = {}
    tfs_by_token: dict[str, list[int]] = {}
    doc_len = np.empty(len(collection), dtype=np.float64)
    ids = np.empty(len(collection), dtype=np.int64)
    for row, seg in enumerate(collection):
        doc_len[row] = len(seg.tokens)
        ids[row] = seg.id
        for token, tf in Counter(seg.tokens).items():
            rows_by_token.setdefault(token, []).append(row)
            tfs_by_token.setdefault(token, []).append(tf)
    postings = {
        token: (
            np.asarray(rows, dtype=np.int64),
            np.asarray(tfs_by_token[token], dtype=np.float64),
        )
        for token, rows in rows_by_token.items()
    }
    avg_len = float(doc_len.mean())
    return Bm25Index(postings=postings, doc_len=doc_len, ids=ids, avg_len=avg_len, k1=k1, b=b)


def bm25_scores(index: Bm25Index, query: Sequence[str]) -> np.ndarray:
    """Dense score vector over collection rows; zero rows share no token."""
    scores = np.zeros(index.n_docs, dtype=np.float64)
    if index.avg_len == 0:
        return scores
    denom_base = index.k1 * (1.0 - index.b + index.b * index.doc_len / index.avg_len)
    for token in query:
        entry = index.postings.get(token)
        if entry is None:
            continue
        rows, tfs = entry
        contrib = index.idf(token) * tfs * (index.k1 + 1.0) / (tfs + denom_base[rows])
        np.add.at(scores, rows, contrib)
    return scores


def bm25_topn(index: Bm25Index, query: Sequence[str], n: int) -> list[tuple[int, float]]:
    """Top-``n`` (segment id, score), score descending, ties by ascending id."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    scores = bm25_scores(index, query)
    cand = np.flatnonzero(scores > 0.0)
    if len(cand) == 0:
        return []
    if len(cand) > n:
        # value-based pre-cut: keeps every candidate tied at the boundary,
        # so the id tie-break below stays exact
        kth = -np.partition(-scores[cand], n - 1)[n - 1]
        cand = cand[scores[cand] >= kth]
    order = np.lexsort((index.ids[cand], -scores[cand]))
    top = cand[order][:n]
    return [(int(index.ids[r]), float(scores[r])) for r in top]


def bm25_top_rows(index: Bm25Index, query: Sequence[str], n: int) -> np.ndarray:
    """Like :func:`bm25_topn` but returns collection rows (internal use)."""
    scores = bm25_scores(index, query)
    cand = np.flatnonzero(scores > 0.0)
    if len(cand) == 0:
        return cand
    if len(cand) > n:
        kth = -np.partition(-scores[cand], n - 1)[n - 1]
        cand = cand[scores[cand] >= kth]
    order = np.lexsort((index.ids[cand], -scores[cand]))
    return cand[order][:n]


def save_bm25(index: Bm25Index, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        write_u32(fh, VERSION)
        write_u64(fh, index.n_docs)
        write_f64(fh, index.avg_len)
        write_f64(fh, index.k1)
        write_f64(fh, index.b)
        for length in index.doc_len:
            write_varint(fh, int(length))
        for seg_id in index.ids:
            write_varint(fh, int(seg_id))
        write_varint(fh, len(index.postings))
        for token in sorted(index.postings):
            rows, tfs = index.postings[token]
            write_str(fh, token)
            write_varint(fh, len(rows))
            prev = 0
            for row, tf in zip(rows.tolist(), tfs.tolist()):
                write_varint(fh, row - prev)
                write_varint(fh, int(tf))
                prev = row
        write_f64(fh, 0.0)  # reserved trailer


def load_bm25(path: str | Path) -> Bm25Index:
    with open(path, "rb") as fh:
        check_magic(fh, MAGIC, VERSION, "BM25 index")
        n = read_u64(fh)
        avg_len = read_f64(fh)
        k1 = read_f64(fh)
        b = read_f64(fh)
        doc_len = np.array([read_varint(fh) for _ in range(n)], dtype=np.float64)
        ids = np.array([read_varint(fh) for _ in range(n)], dtype=np.int64)
        n_tokens = read_varint(fh)
        postings: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for _ in range(n_tokens):
            token = read_str(fh)
            m = read_varint(fh)
            rows = np.empty(m, dtype=np.int64)
            tfs = np.empty(m, dtype=np.float64)
            prev = 0
            for i in range(m):
                prev += read_varint(fh)
                rows[i] = prev
                tfs[i] = read_varint(fh)
            postings[token] = (rows, tfs)
        read_f64(fh)
    return Bm25Index(postings=postings, doc_len=doc_len, ids=ids, avg_len=avg_len, k1=k1, b=b)
