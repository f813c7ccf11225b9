"""Threshold calibration to a target retrieval rate.

Every retriever filters hits by a score threshold in its own score space
(edit similarity for lexical matching, cosine for dense search). To compare
retrievers at equal coverage, the threshold is set on validation best-match
scores so that a target fraction of queries keeps at least one hit: the
empirical (1 - target_rate) quantile.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def retrieval_rate(scores: Sequence[float], threshold: float) -> float:
    """Fraction of queries whose best score reaches ``threshold``.

    NaN scores mean the query retrieved nothing and never count.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no scores")
    with np.errstate(invalid="ignore"):
        return float(np.mean(scores >= threshold))


def calibrate_threshold(scores: Sequence[float], target_rate: float) -> float:
    """Smallest threshold keeping at most a ``target_rate`` fraction of queries.

    ``scores`` are per-query best-match scores (NaN for queries with no
    candidate at all). On tie-free scores the achieved rate is within
    1/len(scores) of the target; when many queries tie exactly at the
    returned threshold the achieved rate is all-or-nothing around the tie.
    """
    if not 0.0 < target_rate <= 1.0:
        raise ValueError(f"target_rate must be in (0, 1], got {target_rate}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot calibrate on an empty score list")
    finite = np.sort(scores[~np.isnan(scores)])[::-1]
    if finite.size == 0:
        return math.inf
    m = int(target_rate * scores.size)
    if m == 0:
        return float(np.nextafter(finite[0], np.inf))
    if m > finite.size:
        m = finite.size
    return float(finite[m - 1])
