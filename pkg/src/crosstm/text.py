"""Tokenization and token-level edit similarity.

All lexical scoring in this package operates on token sequences, not
characters. The default tokenizer splits on whitespace and isolates each
punctuation character as its own token; it is deterministic and total, and
re-tokenizing the space-joined output of a previous run is a no-op.
"""

from __future__ import annotations

import unicodedata
from typing import Sequence


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


class Tokenizer:
    """Configurable whitespace + punctuation tokenizer.

    Parameters
    ----------
    lowercase:
        Case-fold the input before splitting. Matching is case-sensitive
        by default.
    split_punctuation:
        Emit every punctuation character (Unicode category P*) as its own
        token. When False, tokens are plain whitespace-separated chunks.
    """

    def __init__(self, lowercase: bool = False, split_punctuation: bool = True):
        self.lowercase = lowercase
        self.split_punctuation = split_punctuation

    def __call__(self, raw: str) -> list[str]:
        return self.tokenize(raw)

    def tokenize(self, raw: str) -> list[str]:
        if self.lowercase:
            raw = raw.lower()
        if not self.split_punctuation:
            return raw.split()
        tokens: list[str] = []
        word: list[str] = []
        for ch in raw:
            if ch.isspace():
                if word:
                    tokens.append("".join(word))
                    word.clear()
            elif _is_punct(ch):
                if word:
                    tokens.append("".join(word))
                    word.clear()
                tokens.append(ch)
            else:
                word.append(ch)
        if word:
            tokens.append("".join(word))
        return tokens

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return (
            f"Tokenizer(lowercase={self.lowercase}, "
            f"split_punctuation={self.split_punctuation})"
        )


def tokenize(raw: str, lowercase: bool = False, split_punctuation: bool = True) -> list[str]:
    """Tokenize ``raw`` with a one-off :class:`Tokenizer`."""
    return Tokenizer(lowercase=lowercase, split_punctuation=split_punctuation).tokenize(raw)


def levenshtein_distance(a: Sequence[str], b: Sequence[str]) -> int:
    """Token-level Levenshtein distance between two sequences.

    Minimum number of single-token insertions, deletions and substitutions
    turning ``a`` into ``b``. Symmetric, satisfies the triangle inequality,
    and is bounded by ``abs(len(a) - len(b)) <= d <= max(len(a), len(b))``.
    """
    if a == b:
        return 0
    la, lb = len(a), len(b)
    if la == 0:
        return lb
    if lb == 0:
        return la
    # keep the inner loop over the longer side: two rows of size lb + 1
    if la < lb:
        a, b = b, a
        la, lb = lb, la
    prev = list(range(lb + 1))
    cur = [0] * (lb + 1)
    for i in range(1, la + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, lb + 1):
            cost = 0 if ai == b[j - 1] else 1
            d = prev[j - 1] + cost
            u = prev[j] + 1
            if u < d:
                d = u
            l = cur[j - 1] + 1
            if l < d:
                d = l
            cur[j] = d
        prev, cur = cur, prev
    return prev[lb]


def levenshtein_similarity(a: Sequence[str], b: Sequence[str]) -> float:
    """Length-normalized edit similarity in [0, 1].

    ``1 - distance / max(len(a), len(b))``: 1.0 for identical sequences, 0.0
    when one side is empty and the other is not. Two empty sequences are
    identical segments and score 1.0 by convention (avoids 0/0).
    """
    m = max(len(a), len(b))
    if m == 0:
        return 1.0
    return 1.0 - levenshtein_distance(a, b) / m
