import numpy as np
import pytest

from crosstm.corpus import Segment
from crosstm.dense import (
    DenseRetriever,
    VectorIndex,
    build_index,
    knn,
    knn_batch,
    load_index,
    save_index,
)
from crosstm.encoder import UNK, encode, init_params


def toy_params(dim=6, seed=0):
    vocab = {UNK: 0}
    for i in range(12):
        vocab[f"w{i}"] = len(vocab)
    return init_params(vocab, dim=dim, seed=seed)


def seg(i, toks):
    return Segment(i, "t", " ".join(toks), list(toks))


def random_index(rng, n, d, with_duplicates=False):
    vectors = rng.normal(size=(n, d))
    if with_duplicates and n >= 4:
        vectors[1] = vectors[0]
        vectors[3] = vectors[2]
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    ids = np.arange(n, dtype=np.int64)
    return VectorIndex(ids=ids, vectors=vectors)


def brute_force_knn(index, q, k, threshold):
    scored = sorted(
        ((float(np.dot(row, q)), int(sid)) for row, sid in zip(index.vectors, index.ids)),
        key=lambda t: (-t[0], t[1]),
    )
    return [(sid, s) for s, sid in scored[:k] if s >= threshold]


def assert_same_ranking(got, want):
    """Same ids in the same order; scores equal up to BLAS summation order."""
    assert [sid for sid, _ in got] == [sid for sid, _ in want]
    for (_, a), (_, b) in zip(got, want):
        assert a == pytest.approx(b, abs=1e-9)


class TestBuildIndex:
    def test_single_segment(self):
        params = toy_params()
        index = build_index(params, [seg(0, ["w1", "w2"])])
        assert len(index) == 1
        assert np.linalg.norm(index.vectors[0]) == pytest.approx(1.0, abs=1e-6)

    def test_rows_equal_encode(self):
        params = toy_params()
        pool = [seg(i, [f"w{i}", f"w{i+1}"]) for i in range(5)]
        index = build_index(params, pool)
        for row, s in zip(index.vectors, pool):
            np.testing.assert_allclose(row, encode(params, s), atol=1e-12)

    def test_deterministic(self):
        params = toy_params()
        pool = [seg(i, ["w1", f"w{i}"]) for i in range(4)]
        a = build_index(params, pool)
        b = build_index(params, pool)
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_index(toy_params(), [])


class TestKnn:
    def test_self_similarity_first(self):
        rng = np.random.default_rng(0)
        index = random_index(rng, 50, 8)
        hits = knn(index, index.vectors[17], k=1, threshold=-1.0)
        assert hits[0][0] == 17
        assert hits[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_threshold_filters_everything(self):
        rng = np.random.default_rng(1)
        index = random_index(rng, 20, 8)
        q = rng.normal(size=8)
        q /= np.linalg.norm(q)
        assert knn(index, q, k=5, threshold=1.0) == []

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for trial in range(30):
            n = int(rng.integers(2, 500))
            index = random_index(rng, n, 16, with_duplicates=trial % 2 == 0)
            q = rng.normal(size=16)
            q /= np.linalg.norm(q)
            k = int(rng.integers(1, 8))
            thr = float(rng.uniform(-1, 1)) if trial % 3 == 0 else -1.0
            assert_same_ranking(knn(index, q, k=k, threshold=thr), brute_force_knn(index, q, k, thr))

    def test_tie_break_ascending_id(self):
        vectors = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        index = VectorIndex(ids=np.array([7, 3, 9]), vectors=vectors)
        hits = knn(index, np.array([1.0, 0.0]), k=2)
        assert [h[0] for h in hits] == [3, 7]

    def test_insertion_order_invariance(self):
        rng = np.random.default_rng(3)
        index = random_index(rng, 40, 8)
        perm = rng.permutation(40)
        shuffled = VectorIndex(ids=index.ids[perm], vectors=index.vectors[perm])
        q = rng.normal(size=8)
        q /= np.linalg.norm(q)
        assert_same_ranking(knn(index, q, k=10), knn(shuffled, q, k=10))

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(4)
        index = random_index(rng, 5, 8)
        with pytest.raises(ValueError, match="dimension"):
            knn(index, np.ones(7), k=1)

    def test_pool_growth_monotonicity(self):
        rng = np.random.default_rng(5)
        index = random_index(rng, 200, 8)
        q = rng.normal(size=8)
        q /= np.linalg.norm(q)
        best = []
        for n in (50, 100, 200):
            sub = VectorIndex(ids=index.ids[:n], vectors=index.vectors[:n])
            best.append(knn(sub, q, k=1)[0][1])
        assert best[0] <= best[1] <= best[2]

    def test_batch_matches_single(self):
        rng = np.random.default_rng(6)
        index = random_index(rng, 100, 8)
        queries = rng.normal(size=(10, 8))
        queries /= np.linalg.norm(queries, axis=1, keepdims=True)
        batch = knn_batch(index, queries, k=4, threshold=0.1)
        for q, hits in zip(queries, batch):
            assert_same_ranking(hits, knn(index, q, k=4, threshold=0.1))

    def test_batch_exclude_ids(self):
        rng = np.random.default_rng(7)
        index = random_index(rng, 20, 8)
        hits = knn_batch(index, index.vectors[:3], k=3, exclude_ids=[0, 1, 2])
        for i, row in enumerate(hits):
            assert all(sid != i for sid, _ in row)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        index = random_index(rng, 30, 12)
        path = tmp_path / "v.bin"
        save_index(index, path)
        loaded = load_index(path)
        np.testing.assert_array_equal(loaded.ids, index.ids)
        np.testing.assert_allclose(loaded.vectors, index.vectors, atol=1e-6)
        assert np.abs(np.linalg.norm(loaded.vectors, axis=1) - 1.0).max() < 1e-6

    def test_saved_bytes_stable(self, tmp_path):
        rng = np.random.default_rng(9)
        index = random_index(rng, 10, 4)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_index(index, p1)
        save_index(load_index(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"WRONGMAG" + b"\x00" * 12)
        with pytest.raises(ValueError, match="magic"):
            load_index(p)


class TestDenseRetriever:
    def test_fit_kneighbors(self):
        params = toy_params()
        pool = [seg(i, [f"w{i}"]) for i in range(6)]
        retriever = DenseRetriever(params).fit(pool)
        hits = retriever.kneighbors([seg(99, ["w3"])], k=1)[0]
        assert hits[0][0] == 3

    def test_exclude_self(self):
        params = toy_params()
        pool = [seg(i, [f"w{i}"]) for i in range(6)]
        retriever = DenseRetriever(params).fit(pool)
        hits = retriever.kneighbors([pool[2]], k=3, exclude_self=True)[0]
        assert all(sid != 2 for sid, _ in hits)

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            DenseRetriever(toy_params()).kneighbors([seg(0, ["w1"])])

    def test_best_scores(self):
        params = toy_params()
        pool = [seg(i, [f"w{i}"]) for i in range(4)]
        retriever = DenseRetriever(params, threshold=0.999).fit(pool)
        scores = retriever.best_scores([pool[1]])
        assert scores[0] == pytest.approx(1.0, abs=1e-9)
