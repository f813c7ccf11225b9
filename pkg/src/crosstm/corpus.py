"""Parallel corpora and monolingual retrieval pools.

File formats
------------
JSONL: one object per line. Parallel records carry ``src`` and ``tgt``,
monolingual records carry ``text``; an optional ``id`` must equal the
record's 0-based line position (ids are always dense and positional).
TSV: ``source<TAB>target``, parallel corpora only. UTF-8 throughout.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .text import Tokenizer


class CorpusFormatError(ValueError):
    """Malformed corpus file: message names the offending line."""


@dataclass
class Segment:
    """A tokenized sentence; the unit of indexing and retrieval."""

    id: int
    lang: str
    raw: str
    tokens: list[str] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, Segment):
            return NotImplemented
        return (self.id, self.lang, self.raw, self.tokens) == (
            other.id,
            other.lang,
            other.raw,
            other.tokens,
        )


def make_segment(idx: int, lang: str, raw: str, tokenizer: Tokenizer) -> Segment:
    return Segment(id=idx, lang=lang, raw=raw, tokens=tokenizer(raw))


@dataclass
class ParallelCorpus:
    """Aligned (source, target) pairs; pair i has source id i and target id i."""

    pairs: list[tuple[Segment, Segment]]
    src_lang: str = "src"
    tgt_lang: str = "tgt"

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def sources(self) -> list[Segment]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[Segment]:
        return [t for _, t in self.pairs]


@dataclass
class MonolingualPool:
    """Target-language segments retrieval candidates are drawn from."""

    segments: list[Segment]
    lang: str = "mono"

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)


def _detect_mode(path: Path, fmt: str) -> str:
    if fmt == "tsv":
        return "parallel"
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            return "mono" if "text" in record else "parallel"
    return "parallel"


def load_corpus(
    path: str | Path,
    fmt: str = "jsonl",
    mode: str = "auto",
    tokenizer: Tokenizer | None = None,
    src_lang: str = "src",
    tgt_lang: str = "tgt",
    lang: str = "mono",
) -> ParallelCorpus | MonolingualPool:
    """Load and tokenize a corpus file.

    ``mode`` is ``parallel``, ``mono`` or ``auto`` (decided from the first
    record: a ``text`` field means monolingual). Raises
    :class:`CorpusFormatError` naming the line for any malformed record,
    and for empty files.
    """
    path = Path(path)
    if fmt not in ("jsonl", "tsv"):
        raise ValueError(f"unknown corpus format: {fmt!r}")
    tokenizer = tokenizer or Tokenizer()
    if mode == "auto":
        mode = _detect_mode(path, fmt)
    if mode == "mono" and fmt == "tsv":
        raise ValueError("tsv corpora are parallel; use jsonl for monolingual pools")

    pairs: list[tuple[Segment, Segment]] = []
    segments: list[Segment] = []
    n = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if fmt == "tsv":
                parts = line.split("\t")
                if len(parts) != 2:
                    raise CorpusFormatError(
                        f"{path}:{lineno}: expected 'source<TAB>target', "
                        f"got {len(parts)} column(s)"
                    )
                src_raw, tgt_raw = parts
            else:
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                if not isinstance(record, dict):
                    raise CorpusFormatError(f"{path}:{lineno}: record is not an object")
                if "id" in record and record["id"] != n:
                    raise CorpusFormatError(
                        f"{path}:{lineno}: explicit id {record['id']} does not match "
                        f"position {n}; ids must be dense in file order"
                    )
                if mode == "mono":
                    if "text" not in record:
                        raise CorpusFormatError(f"{path}:{lineno}: missing field 'text'")
                    src_raw, tgt_raw = record["text"], None
                else:
                    for fld in ("src", "tgt"):
                        if fld not in record:
                            raise CorpusFormatError(f"{path}:{lineno}: missing field {fld!r}")
                    src_raw, tgt_raw = record["src"], record["tgt"]
            if mode == "mono":
                if not src_raw:
                    raise CorpusFormatError(f"{path}:{lineno}: empty text")
                segments.append(make_segment(n, lang, src_raw, tokenizer))
            else:
                if not src_raw or not tgt_raw:
                    raise CorpusFormatError(f"{path}:{lineno}: empty source or target")
                pairs.append(
                    (
                        make_segment(n, src_lang, src_raw, tokenizer),
                        make_segment(n, tgt_lang, tgt_raw, tokenizer),
                    )
                )
            n += 1
    if n == 0:
        raise CorpusFormatError(f"{path}: empty corpus file")
    if mode == "mono":
        return MonolingualPool(segments=segments, lang=lang)
    return ParallelCorpus(pairs=pairs, src_lang=src_lang, tgt_lang=tgt_lang)


def save_corpus(corpus: ParallelCorpus | MonolingualPool, path: str | Path, fmt: str = "jsonl") -> None:
    """Write a corpus back to disk; inverse of :func:`load_corpus`."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        if isinstance(corpus, MonolingualPool):
            if fmt != "jsonl":
                raise ValueError("monolingual pools are saved as jsonl only")
            for i, seg in enumerate(corpus.segments):
                fh.write(json.dumps({"id": i, "text": seg.raw}, ensure_ascii=False) + "\n")
            return
        for i, (src, tgt) in enumerate(corpus.pairs):
            if fmt == "tsv":
                for side in (src.raw, tgt.raw):
                    if "\t" in side or "\n" in side:
                        raise ValueError(
                            f"pair {i}: tsv cannot represent tabs or newlines in text"
                        )
                fh.write(f"{src.raw}\t{tgt.raw}\n")
            else:
                fh.write(
                    json.dumps(
                        {"id": i, "src": src.raw, "tgt": tgt.raw}, ensure_ascii=False
                    )
                    + "\n"
                )


def split_corpus(
    corpus: ParallelCorpus,
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[ParallelCorpus, ParallelCorpus, ParallelCorpus]:
    """Deterministic train/valid/test partition.

    Fractions must be positive and sum to 1. Sizes of valid and test are
    floored; the remainder goes to train. Segment ids are reassigned so each
    split is a well-formed corpus on its own.
    """
    if len(fractions) != 3:
        raise ValueError("need exactly three fractions (train, valid, test)")
    if any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n = len(corpus)
    if n < 3:
        raise ValueError(f"corpus of size {n} cannot be split three ways")

    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_valid = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_valid - n_test
    cut1, cut2 = n_train, n_train + n_valid

    def take(idx: Iterable[int]) -> ParallelCorpus:
        pairs = []
        for new_id, i in enumerate(idx):
            src, tgt = corpus.pairs[i]
            pairs.append(
                (
                    Segment(new_id, src.lang, src.raw, list(src.tokens)),
                    Segment(new_id, tgt.lang, tgt.raw, list(tgt.tokens)),
                )
            )
        return ParallelCorpus(pairs, corpus.src_lang, corpus.tgt_lang)

    return take(order[:cut1]), take(order[cut1:cut2]), take(order[cut2:])


def decontaminate(
    pool: MonolingualPool,
    held_out: Sequence[Segment],
    threshold: float = 0.9,
    prefilter_n: int | None = 100,
) -> MonolingualPool:
    """Remove held-out near-duplicates and exact duplicates from a pool.

    A pool segment is dropped when the edit similarity to its best match in
    ``held_out`` strictly exceeds ``threshold``. Best-match search runs
    through the lexical fuzzy matcher (BM25 prefilter of ``prefilter_n``
    candidates, then exact rescoring; ``None`` scans the whole held-out
    set). Surviving segments are renumbered densely in original order.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    from .fuzzy import FuzzyMatcher  # deferred: fuzzy depends on this module

    seen: set[str] = set()
    deduped: list[Segment] = []
    for seg in pool.segments:
        if seg.raw in seen:
            continue
        seen.add(seg.raw)
        deduped.append(seg)

    if held_out:
        matcher = FuzzyMatcher(prefilter_n=prefilter_n).fit(list(held_out))
        kept: list[Segment] = []
        for seg in deduped:
            result = matcher.kneighbors([seg], k=1)[0]
            best = result.hits[0][1] if result.hits else 0.0
            if best <= threshold:
                kept.append(seg)
    else:
        kept = deduped

    return MonolingualPool(
        segments=[Segment(i, s.lang, s.raw, list(s.tokens)) for i, s in enumerate(kept)],
        lang=pool.lang,
    )
