import numpy as np
import pytest

from crosstm.corpus import ParallelCorpus, Segment
from crosstm.encoder import UNK, build_vocab, encode_batch, init_params, params_to_vector
from crosstm.text import levenshtein_similarity
from crosstm.training import (
    DualEncoder,
    TrainConfig,
    TrainingExample,
    in_batch_ndcg,
    load_checkpoint,
    load_examples,
    load_train_config,
    mine_candidates_dense,
    mine_candidates_lexical,
    save_checkpoint,
    save_examples,
    train,
)

from synthdata import world_corpora


def seg(i, toks, lang="t"):
    return Segment(i, lang, " ".join(toks), list(toks))


@pytest.fixture(scope="module")
def tiny_world():
    return world_corpora(seed=4, n_train=60, n_valid=12, n_pool=40, vocab_size=50, n_templates=8)


def lexical_examples(corpus, pool):
    return mine_candidates_lexical(corpus, pool.targets, k=3)


class TestMining:
    def test_lexical_sorted_and_recomputable(self, tiny_world):
        _, train_c, valid_c, pool_c = tiny_world
        examples = lexical_examples(valid_c, pool_c)
        assert len(examples) == len(valid_c)
        for ex in examples:
            levs = [lev for _, lev in ex.candidates]
            assert levs == sorted(levs, reverse=True)
            for cand, lev in ex.candidates:
                assert lev == pytest.approx(
                    levenshtein_similarity(ex.y.tokens, cand.tokens), abs=1e-12
                )

    def test_k_truncates_to_pool(self):
        corpus = ParallelCorpus([(seg(0, ["s1"], "src"), seg(0, ["t1"], "tgt"))])
        pool = [seg(0, ["t1"]), seg(1, ["t2"])]
        examples = mine_candidates_lexical(corpus, pool, k=3, prefilter_n=None)
        assert len(examples[0].candidates) == 2

    def test_exact_duplicate_is_top_candidate(self):
        corpus = ParallelCorpus(
            [(seg(0, ["s1", "s2"], "src"), seg(0, ["t1", "t2"], "tgt"))]
        )
        pool = [seg(0, ["t9"]), seg(1, ["t1", "t2"]), seg(2, ["t1", "t3"])]
        examples = mine_candidates_lexical(corpus, pool, k=3, prefilter_n=None)
        top_seg, top_lev = examples[0].candidates[0]
        assert top_seg.id == 1
        assert top_lev == 1.0

    def test_exclude_self(self):
        corpus = ParallelCorpus(
            [(seg(0, ["s1"], "src"), seg(0, ["t1", "t2"], "tgt"))]
        )
        pool = [seg(0, ["t1", "t2"]), seg(1, ["t1", "t3"])]
        examples = mine_candidates_lexical(corpus, pool, k=2, prefilter_n=None, exclude_self=True)
        assert [c.id for c, _ in examples[0].candidates] == [1]

    def test_dense_mining_labels_with_lev(self, tiny_world):
        _, train_c, valid_c, pool_c = tiny_world
        vocab = build_vocab(train_c.sources + train_c.targets)
        params = init_params(vocab, dim=16, seed=0)
        examples = mine_candidates_dense(params, valid_c, pool_c.targets, k=3)
        for ex in examples:
            assert len(ex.candidates) == 3
            levs = [lev for _, lev in ex.candidates]
            assert levs == sorted(levs, reverse=True)
            for cand, lev in ex.candidates:
                assert lev == pytest.approx(
                    levenshtein_similarity(ex.y.tokens, cand.tokens), abs=1e-12
                )


class TestExamplesFile:
    def test_round_trip(self, tiny_world, tmp_path):
        _, _, valid_c, pool_c = tiny_world
        examples = lexical_examples(valid_c, pool_c)
        path = tmp_path / "ex.jsonl"
        save_examples(examples, path, meta={"k": 3})
        loaded = load_examples(path)
        assert len(loaded) == len(examples)
        for a, b in zip(examples, loaded):
            assert a.x.raw == b.x.raw
            assert a.y.raw == b.y.raw
            assert [(c.id, lev) for c, lev in a.candidates] == [
                (c.id, lev) for c, lev in b.candidates
            ]

    def test_unsorted_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            '{"x": "a", "y": "b c", "candidates": ['
            '{"id": 0, "text": "x y", "lev": 0.0}, {"id": 1, "text": "b c", "lev": 1.0}]}\n',
            encoding="utf-8",
        )
        with pytest.raises(ValueError, match="sorted"):
            load_examples(path)

    def test_wrong_lev_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            '{"x": "a", "y": "b c", "candidates": [{"id": 0, "text": "b c", "lev": 0.5}]}\n',
            encoding="utf-8",
        )
        with pytest.raises(ValueError, match="does not match"):
            load_examples(path)


class TestTrainConfig:
    def test_parse_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(
            "# fine-tuning run\n"
            "objective = ft-MSE\n"
            "lr = 1e-3\n"
            "lr_ab = 0.05\n"
            "epochs = 4\n"
            "batch_size = 8\n"
            "seed = 11\n"
            "dim = 32\n"
            "m = 0.5\n"
            "bow_set_semantics = false\n",
            encoding="utf-8",
        )
        config = load_train_config(path)
        assert config.objective == "ft-MSE"
        assert config.lr == pytest.approx(1e-3)
        assert config.lr_ab == pytest.approx(0.05)
        assert config.epochs == 4
        assert config.batch_size == 8
        assert config.seed == 11
        assert config.dim == 32
        assert config.m == pytest.approx(0.5)
        assert config.bow_set_semantics is False

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("learning_rate = 0.1\n", encoding="utf-8")
        with pytest.raises(ValueError, match="unknown config key"):
            load_train_config(path)

    def test_unknown_objective(self):
        with pytest.raises(ValueError, match="unknown objective"):
            TrainConfig(objective="adamw").validate()


class TestTrain:
    def test_deterministic_history(self, tiny_world):
        _, train_c, valid_c, pool_c = tiny_world
        valid_ex = lexical_examples(valid_c, pool_c)
        config = TrainConfig(objective="contrastive", epochs=2, batch_size=16, dim=12, seed=5)
        _, h1 = train(train_c, config, valid_ex)
        _, h2 = train(train_c, config, valid_ex)
        assert h1["train_loss"] == h2["train_loss"]
        assert h1["valid_ndcg"] == h2["valid_ndcg"]

    def test_zero_gradient_leaves_params_unchanged(self):
        # two identical candidates with equal similarity: every hinge is
        # inactive, so one epoch must be a no-op
        cand = seg(0, ["t1", "t2"])
        example = TrainingExample(
            x=seg(0, ["s1"], "src"),
            y=seg(0, ["t1", "t2"], "tgt"),
            candidates=[(cand, 0.5), (cand, 0.5)],
        )
        config = TrainConfig(objective="ft-Rank", epochs=1, batch_size=4, dim=8, m=0.0)
        vocab = build_vocab([example.x, example.y, cand])
        init = init_params(vocab, dim=8, seed=2)
        before = params_to_vector(init).copy()
        params, history = train(None, config, [example], train_examples=[example], init=init)
        np.testing.assert_array_equal(params_to_vector(params), before)

    def test_ft_requires_candidates(self, tiny_world):
        _, train_c, valid_c, pool_c = tiny_world
        valid_ex = lexical_examples(valid_c, pool_c)
        config = TrainConfig(objective="ft-MSE", epochs=1)
        with pytest.raises(ValueError, match="mined candidates"):
            train(train_c, config, valid_ex, train_examples=None)
        bare = [TrainingExample(x=ex.x, y=ex.y) for ex in valid_ex]
        with pytest.raises(ValueError, match="mined candidates"):
            train(train_c, config, valid_ex, train_examples=bare)

    def test_best_checkpoint_tracked(self, tiny_world):
        _, train_c, valid_c, pool_c = tiny_world
        valid_ex = lexical_examples(valid_c, pool_c)
        config = TrainConfig(objective="contrastive", epochs=3, batch_size=16, dim=12, seed=1)
        _, history = train(train_c, config, valid_ex)
        assert len(history["valid_ndcg"]) == 3
        best = history["best_epoch"]
        assert history["valid_ndcg"][best] == max(history["valid_ndcg"])
        assert history["best_ndcg"] == history["valid_ndcg"][best]

    def test_loss_recorded_per_step(self, tiny_world):
        _, train_c, valid_c, pool_c = tiny_world
        valid_ex = lexical_examples(valid_c, pool_c)
        config = TrainConfig(objective="contrastive+bow", epochs=2, batch_size=32, dim=12)
        _, history = train(train_c, config, valid_ex)
        steps_per_epoch = (len(train_c) + 31) // 32
        assert len(history["train_loss"]) == 2 * steps_per_epoch

    @pytest.mark.parametrize("objective", ["ft-MSE", "ft-MAE", "ft-Rank"])
    def test_fine_tuning_runs(self, tiny_world, objective):
        _, train_c, valid_c, pool_c = tiny_world
        valid_ex = lexical_examples(valid_c, pool_c)
        train_ex = lexical_examples(train_c, pool_c)
        base_cfg = TrainConfig(objective="contrastive", epochs=1, batch_size=16, dim=12, seed=0)
        base, _ = train(train_c, base_cfg, valid_ex)
        ft_cfg = TrainConfig(objective=objective, epochs=1, batch_size=8, seed=0)
        params, history = train(None, ft_cfg, valid_ex, train_examples=train_ex, init=base)
        assert len(history["train_loss"]) > 0
        assert params.vocab == base.vocab


class TestInBatchNdcg:
    def test_single_candidate_examples_score_one(self):
        vocab = build_vocab([seg(0, ["a", "b"])])
        params = init_params(vocab, dim=4, seed=0)
        examples = [
            TrainingExample(x=seg(0, ["a"]), y=seg(0, ["b"]), candidates=[(seg(1, ["b"]), 0.7)])
        ]
        assert in_batch_ndcg(params, examples) == pytest.approx(1.0)

    def test_no_examples_rejected(self):
        vocab = build_vocab([seg(0, ["a"])])
        params = init_params(vocab, dim=4, seed=0)
        with pytest.raises(ValueError, match="validation"):
            in_batch_ndcg(params, [])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        vocab = build_vocab([seg(0, ["alpha", "beta", "gamma"])])
        params = init_params(vocab, dim=6, seed=3)
        params.a, params.b = 1.7, -0.4
        path = tmp_path / "ck.bin"
        save_checkpoint(params, path, config_echo={"objective": "contrastive", "seed": 3})
        loaded, echo = load_checkpoint(path)
        assert echo == {"objective": "contrastive", "seed": 3}
        assert loaded.vocab == params.vocab
        np.testing.assert_array_equal(params_to_vector(loaded), params_to_vector(params))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"BADMAGIC" + b"\x00" * 20)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_saved_bytes_stable(self, tmp_path):
        vocab = build_vocab([seg(0, ["a", "b"])])
        params = init_params(vocab, dim=4, seed=0)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(params, p1, {"seed": 0})
        loaded, echo = load_checkpoint(p1)
        save_checkpoint(loaded, p2, echo)
        assert p1.read_bytes() == p2.read_bytes()


class TestDualEncoderEstimator:
    def test_fit_transform(self, tiny_world):
        _, train_c, valid_c, pool_c = tiny_world
        valid_ex = lexical_examples(valid_c, pool_c)
        model = DualEncoder(objective="contrastive", dim=12, epochs=1, batch_size=16, seed=0)
        model.fit(train_c, valid_ex)
        emb = model.transform(pool_c.targets[:5])
        assert emb.shape == (5, 12)
        np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-6)

    def test_get_params(self):
        model = DualEncoder(objective="ft-MAE", dim=8, lr=2e-4)
        params = model.get_params()
        assert params["objective"] == "ft-MAE"
        assert params["dim"] == 8
        assert params["lr"] == pytest.approx(2e-4)

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            DualEncoder().transform([seg(0, ["a"])])
