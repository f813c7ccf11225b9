import random

import numpy as np
import pytest

from crosstm.bm25 import build_bm25
from crosstm.corpus import make_segment
from crosstm.fuzzy import FuzzyMatcher, fuzzy_match
from crosstm.text import Tokenizer, levenshtein_similarity


def segs(*texts):
    tok = Tokenizer()
    return [make_segment(i, "t", t, tok) for i, t in enumerate(texts)]


def random_collection(rng, n, vocab=6, min_len=2, max_len=8):
    texts = [
        " ".join(rng.choice("abcdef"[:vocab]) for _ in range(rng.randint(min_len, max_len)))
        for _ in range(n)
    ]
    return segs(*texts)


def brute_force(collection, query, k, threshold=0.0, exclude_self=False):
    scored = []
    for seg in collection:
        if exclude_self and seg.id == query.id:
            continue
        lev = levenshtein_similarity(query.tokens, seg.tokens)
        if lev >= threshold:
            scored.append((-lev, seg.id))
    scored.sort()
    return [(sid, -neg) for neg, sid in scored[:k]]


class TestFuzzyMatch:
    def test_exact_match_found(self):
        collection = segs("a b c", "d e f", "g h i")
        index = build_bm25(collection)
        query = make_segment(99, "t", "d e f", Tokenizer())
        result = fuzzy_match(index, collection, query, k=1)
        assert result.hits == [(1, 1.0)]
        assert result.query_id == 99

    def test_threshold_one_without_exact_match(self):
        collection = segs("a b c", "d e f")
        index = build_bm25(collection)
        query = make_segment(0, "t", "a b x", Tokenizer())
        result = fuzzy_match(index, collection, query, k=3, threshold=1.0)
        assert result.hits == []

    def test_exclude_self(self):
        collection = segs("a b c", "a b d")
        index = build_bm25(collection)
        result = fuzzy_match(index, collection, collection[0], k=2, exclude_self=True)
        assert result.hits[0][0] == 1
        assert all(sid != 0 for sid, _ in result.hits)

    def test_exact_mode_equals_brute_force(self):
        rng = random.Random(11)
        for trial in range(12):
            collection = random_collection(rng, rng.randint(1, 200))
            index = build_bm25(collection)
            for _ in range(8):
                query = make_segment(
                    10_000, "t", " ".join(rng.choice("abcdef") for _ in range(rng.randint(1, 8))), Tokenizer()
                )
                k = rng.randint(1, 5)
                thr = rng.choice([0.0, 0.3, 0.6])
                got = fuzzy_match(index, collection, query, k=k, threshold=thr).hits
                assert got == brute_force(collection, query, k, thr)

    def test_prefilter_recovers_most_top1(self):
        from synthdata import natural_pool, perturbed_queries

        pool = natural_pool(seed=5, n=1000)
        collection = pool.segments
        index = build_bm25(collection)
        queries = perturbed_queries(seed=6, pool=pool, n=100)
        agree = 0
        for q in queries:
            exact = fuzzy_match(index, collection, q, k=1, prefilter_n=None).hits
            fast = fuzzy_match(index, collection, q, k=1, prefilter_n=100).hits
            agree += exact == fast
        assert agree >= 95

    def test_raising_threshold_never_adds_hits(self):
        rng = random.Random(3)
        collection = random_collection(rng, 60)
        index = build_bm25(collection)
        query = make_segment(777, "t", "a b c d", Tokenizer())
        counts = [
            len(fuzzy_match(index, collection, query, k=50, threshold=t).hits)
            for t in (0.0, 0.25, 0.5, 0.75, 1.0)
        ]
        assert counts == sorted(counts, reverse=True)

    def test_pool_growth_monotonicity(self):
        rng = random.Random(9)
        big = random_collection(rng, 120)
        query = make_segment(555, "t", "a b c d e", Tokenizer())
        best = []
        for n in (30, 60, 120):
            sub = big[:n]
            index = build_bm25(sub)
            hits = fuzzy_match(index, sub, query, k=1).hits
            best.append(hits[0][1])
        assert best[0] <= best[1] <= best[2]

    def test_k_zero_rejected(self):
        collection = segs("a b")
        index = build_bm25(collection)
        with pytest.raises(ValueError, match="k must be"):
            fuzzy_match(index, collection, collection[0], k=0)


class TestFuzzyMatcherEstimator:
    def test_fit_kneighbors(self):
        matcher = FuzzyMatcher(prefilter_n=None).fit(segs("a b c", "x y z"))
        results = matcher.kneighbors(segs("a b c"), k=1)
        assert results[0].hits == [(0, 1.0)]

    def test_unfitted_raises(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            FuzzyMatcher().kneighbors(segs("a"))

    def test_get_params_round_trip(self):
        matcher = FuzzyMatcher(k1=1.4, b=0.5, prefilter_n=10, threshold=0.2)
        params = matcher.get_params()
        assert params["k1"] == 1.4
        clone = FuzzyMatcher(**params)
        assert clone.get_params() == params

    def test_threshold_param_applied(self):
        matcher = FuzzyMatcher(prefilter_n=None, threshold=0.9).fit(segs("a b c d", "a b x y"))
        results = matcher.kneighbors(segs("a b c d"), k=2)
        assert results[0].hits == [(0, 1.0)]

    def test_best_scores_ignore_threshold(self):
        matcher = FuzzyMatcher(prefilter_n=None, threshold=0.99).fit(segs("a b c d", "p q"))
        scores = matcher.best_scores(segs("a b c x"))
        assert scores[0] == pytest.approx(0.75)

    def test_best_scores_nan_when_no_candidate(self):
        matcher = FuzzyMatcher(prefilter_n=100).fit(segs("a b", "c d"))
        scores = matcher.best_scores(segs("zz qq"))
        assert np.isnan(scores[0])
