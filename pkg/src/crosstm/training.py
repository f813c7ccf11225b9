"""Training loop, candidate mining, and checkpoint/example file formats.

Five objectives are supported: ``contrastive`` and ``contrastive+bow``
train a retriever from aligned pairs; ``ft-MSE``, ``ft-MAE`` and
``ft-Rank`` fine-tune an existing retriever on mined examples, each pairing
a source with up to k pool candidates labeled by their edit similarity to
the reference. Optimization is plain mini-batch gradient descent with one
learning rate for the encoder and a separate, larger one for the two
mapping scalars, optional heavy-ball momentum, and per-epoch validation by
ranking NDCG; the best-NDCG checkpoint wins. Runs are bit-reproducible for
a fixed seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._binio import (
    check_magic,
    read_exact,
    read_str,
    read_u32,
    write_str,
    write_u32,
)
from .corpus import ParallelCorpus, Segment
from .dense import build_index, knn_batch
from .encoder import (
    EncoderGrads,
    EncoderParams,
    build_vocab,
    encode_batch,
    init_params,
    loss_bow,
    loss_contrastive,
    loss_rank,
    regression_example,
)
from .evaluate import ndcg
from .fuzzy import FuzzyMatcher
from .text import Tokenizer, levenshtein_similarity

OBJECTIVES = ("contrastive", "contrastive+bow", "ft-MSE", "ft-MAE", "ft-Rank")

CHECKPOINT_MAGIC = b"XTMENC\x00\x00"
CHECKPOINT_VERSION = 1


@dataclass
class TrainingExample:
    """A source, its reference target, and mined candidates.

    Candidates are (segment, edit similarity to the reference) sorted by
    similarity descending.
    """

    x: Segment
    y: Segment
    candidates: list[tuple[Segment, float]] = field(default_factory=list)


@dataclass
class TrainConfig:
    objective: str = "contrastive"
    lr: float = 1e-4
    lr_ab: float = 1e-2
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    dim: int = 64
    m: float = 1.0                  # rank-loss margin scale
    bow_set_semantics: bool = True
    bow_weight: float = 1.0
    momentum: float = 0.0
    min_count: int = 1

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(
                f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_train_config(path: str | Path) -> TrainConfig:
    """Parse a ``key = value`` config file (``#`` starts a comment)."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            ftype = fields[key].type
            if ftype == "bool":
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"{path}:{lineno}: bad boolean {raw!r}")
                values[key] = raw.lower() in ("true", "1", "yes")
            elif ftype == "int":
                values[key] = int(raw)
            elif ftype == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
    config = TrainConfig(**values)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# candidate mining


def _sorted_candidates(
    hits: Sequence[tuple[int, float]],
    pool_by_id: dict[int, Segment],
    reference: Segment,
) -> list[tuple[Segment, float]]:
    cands = []
    for sid, _score in hits:
        seg = pool_by_id[sid]
        cands.append((seg, levenshtein_similarity(reference.tokens, seg.tokens)))
    cands.sort(key=lambda c: (-c[1], c[0].id))
    return cands


def mine_candidates_lexical(
    corpus: ParallelCorpus,
    pool: Sequence[Segment],
    k: int = 3,
    prefilter_n: int | None = 100,
    exclude_self: bool = False,
) -> list[TrainingExample]:
    """Mine candidates by fuzzy-matching each reference against the pool.

    Set ``exclude_self`` when the pool is the corpus's own target side.
    """
    pool = list(pool)
    pool_by_id = {s.id: s for s in pool}
    matcher = FuzzyMatcher(prefilter_n=prefilter_n).fit(pool)
    examples = []
    for x, y in corpus.pairs:
        result = matcher.kneighbors([y], k=k, exclude_self=exclude_self)[0]
        examples.append(
            TrainingExample(x=x, y=y, candidates=_sorted_candidates(result.hits, pool_by_id, y))
        )
    return examples


def mine_candidates_dense(
    params: EncoderParams,
    corpus: ParallelCorpus,
    pool: Sequence[Segment],
    k: int = 3,
    exclude_self: bool = False,
) -> list[TrainingExample]:
    """Mine candidates by dense retrieval from each source; label with edit similarity."""
    pool = list(pool)
    pool_by_id = {s.id: s for s in pool}
    index = build_index(params, pool)
    queries = encode_batch(params, corpus.sources)
    exclude = [x.id for x, _ in corpus.pairs] if exclude_self else None
    all_hits = knn_batch(index, queries, k=k, threshold=-np.inf, exclude_ids=exclude)
    return [
        TrainingExample(x=x, y=y, candidates=_sorted_candidates(hits, pool_by_id, y))
        for (x, y), hits in zip(corpus.pairs, all_hits)
    ]


# ---------------------------------------------------------------------------
# examples file format (jsonl)


def save_examples(examples: Sequence[TrainingExample], path: str | Path, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, ensure_ascii=False, sort_keys=True) + "\n")
        for ex in examples:
            record = {
                "x": ex.x.raw,
                "y": ex.y.raw,
                "candidates": [
                    {"id": seg.id, "text": seg.raw, "lev": lev} for seg, lev in ex.candidates
                ],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_examples(path: str | Path, tokenizer: Tokenizer | None = None) -> list[TrainingExample]:
    """Load mined examples; similarity labels are recomputed and verified."""
    tokenizer = tokenizer or Tokenizer()
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            if "_meta" in record:
                continue
            x = Segment(len(examples), "src", record["x"], tokenizer(record["x"]))
            y = Segment(len(examples), "tgt", record["y"], tokenizer(record["y"]))
            cands = []
            prev = 1.0
            for c in record["candidates"]:
                seg = Segment(c["id"], "cand", c["text"], tokenizer(c["text"]))
                lev = levenshtein_similarity(y.tokens, seg.tokens)
                if abs(lev - c["lev"]) > 1e-9:
                    raise ValueError(
                        f"{path}:{lineno}: stored similarity {c['lev']} does not match "
                        f"recomputed {lev}; tokenizer mismatch?"
                    )
                if lev > prev + 1e-12:
                    raise ValueError(f"{path}:{lineno}: candidates not sorted by similarity")
                prev = lev
                cands.append((seg, lev))
            examples.append(TrainingExample(x=x, y=y, candidates=cands))
    return examples


# ---------------------------------------------------------------------------
# validation metric


def in_batch_ndcg(params: EncoderParams, examples: Sequence[TrainingExample]) -> float:
    """Mean NDCG of model-ranked candidates against edit-similarity gains."""
    if not examples:
        raise ValueError("no validation examples")
    scores = []
    for ex in examples:
        if not ex.candidates:
            continue
        ex_vec = encode_batch(params, [ex.x])[0]
        cand_vecs = encode_batch(params, [seg for seg, _ in ex.candidates])
        sims = cand_vecs @ ex_vec
        order = np.lexsort((np.arange(len(sims)), -sims))
        scores.append(ndcg([ex.candidates[i][1] for i in order]))
    if not scores:
        raise ValueError("no validation example has candidates")
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# optimization


def _batch_loss(
    params: EncoderParams,
    objective: str,
    batch: list,
    config: TrainConfig,
) -> tuple[float, EncoderGrads, int]:
    """Summed loss and grads over one batch plus the normalization count."""
    total = EncoderGrads.zeros_like(params)
    if objective in ("contrastive", "contrastive+bow"):
        loss, grads = loss_contrastive(params, [(ex.x, ex.y) for ex in batch])
        total.add(grads)
        if objective == "contrastive+bow":
            for ex in batch:
                bloss, bgrads = loss_bow(
                    params, ex.x, ex.y, set_semantics=config.bow_set_semantics
                )
                bgrads.scale(config.bow_weight)
                total.add(bgrads)
                loss += config.bow_weight * bloss
        return loss, total, len(batch)
    if objective in ("ft-MSE", "ft-MAE"):
        kind = objective.split("-")[1]
        loss = 0.0
        count = 0
        for ex in batch:
            if not ex.candidates:
                continue
            loss += regression_example(params, ex.x, ex.candidates, kind, total)
            count += len(ex.candidates)
        return loss, total, count
    # ft-Rank: examples with fewer than two candidates carry no pair to rank
    loss = 0.0
    count = 0
    for ex in batch:
        if len(ex.candidates) < 2:
            continue
        l, grads = loss_rank(params, ex.x, ex.candidates, margin_scale=config.m)
        total.add(grads)
        loss += l
        count += 1
    return loss, total, count


def _apply_update(
    params: EncoderParams,
    grads: EncoderGrads,
    config: TrainConfig,
    velocity: EncoderGrads | None,
) -> None:
    if velocity is not None:
        velocity.scale(config.momentum)
        velocity.add(grads)
        grads = velocity
    params.emb -= config.lr * grads.emb
    params.proj -= config.lr * grads.proj
    params.proj_bias -= config.lr * grads.proj_bias
    params.bow_src_w -= config.lr * grads.bow_src_w
    params.bow_src_b -= config.lr * grads.bow_src_b
    params.bow_tgt_w -= config.lr * grads.bow_tgt_w
    params.bow_tgt_b -= config.lr * grads.bow_tgt_b
    params.a -= config.lr_ab * grads.a
    params.b -= config.lr_ab * grads.b


def train(
    corpus: ParallelCorpus | None,
    config: TrainConfig,
    valid_examples: Sequence[TrainingExample],
    train_examples: Sequence[TrainingExample] | None = None,
    init: EncoderParams | None = None,
) -> tuple[EncoderParams, dict]:
    """Run the configured objective; return the best-NDCG checkpoint and history.

    ``corpus`` feeds the pair objectives; the fine-tuning objectives train
    on ``train_examples`` (mined beforehand) and raise without them. When
    ``init`` is given, training continues from it (its vocabulary
    included); otherwise parameters are freshly initialized from the corpus
    vocabulary.
    """
    config.validate()
    fine_tuning = config.objective.startswith("ft-")
    if fine_tuning:
        if not train_examples or all(not ex.candidates for ex in train_examples):
            raise ValueError(
                f"objective {config.objective!r} requires mined candidates; none provided"
            )
        items: list = list(train_examples)
    else:
        if corpus is None or len(corpus) < 2:
            raise ValueError("pair objectives need a corpus with at least 2 pairs")
        items = [TrainingExample(x=x, y=y) for x, y in corpus.pairs]

    if init is not None:
        params = init.copy()
    else:
        if corpus is not None:
            vocab_segs = corpus.sources + corpus.targets
        else:
            vocab_segs = [s for ex in items for s in (ex.x, ex.y)]
        params = init_params(build_vocab(vocab_segs, config.min_count), config.dim, config.seed)

    rng = np.random.default_rng(config.seed)
    velocity = EncoderGrads.zeros_like(params) if config.momentum > 0 else None
    history: dict = {"train_loss": [], "valid_ndcg": [], "best_epoch": None, "best_ndcg": None}
    best_ndcg = -np.inf
    best_params = params.copy()

    for epoch in range(config.epochs):
        order = rng.permutation(len(items))
        for start in range(0, len(items), config.batch_size):
            batch = [items[i] for i in order[start : start + config.batch_size]]
            if not fine_tuning and len(batch) < 2:
                continue  # a lone pair has no in-batch negative
            loss, grads, count = _batch_loss(params, config.objective, batch, config)
            if count == 0:
                continue
            grads.scale(1.0 / count)
            _apply_update(params, grads, config, velocity)
            history["train_loss"].append(loss / count)
        epoch_ndcg = in_batch_ndcg(params, valid_examples)
        history["valid_ndcg"].append(epoch_ndcg)
        if epoch_ndcg > best_ndcg:
            best_ndcg = epoch_ndcg
            best_params = params.copy()
            history["best_epoch"] = epoch
            history["best_ndcg"] = epoch_ndcg
    return best_params, history


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(params: EncoderParams, path: str | Path, config_echo: dict | None = None) -> None:
    tokens = [None] * len(params.vocab)
    for tok, i in params.vocab.items():
        tokens[i] = tok
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        write_u32(fh, CHECKPOINT_VERSION)
        write_str(fh, json.dumps(config_echo or {}, ensure_ascii=False, sort_keys=True))
        write_u32(fh, params.vocab_size)
        write_u32(fh, params.dim)
        for tok in tokens:
            write_str(fh, tok)
        for arr in (
            params.emb,
            params.proj,
            params.proj_bias,
            np.array([params.a, params.b]),
            params.bow_src_w,
            params.bow_src_b,
            params.bow_tgt_w,
            params.bow_tgt_b,
        ):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, dict]:
    with open(path, "rb") as fh:
        check_magic(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "encoder checkpoint")
        config_echo = json.loads(read_str(fh))
        v = read_u32(fh)
        d = read_u32(fh)
        vocab = {read_str(fh): i for i in range(v)}

        def arr(*shape):
            n = int(np.prod(shape))
            return np.frombuffer(read_exact(fh, 8 * n), dtype="<f8").copy().reshape(shape)

        emb = arr(v, d)
        proj = arr(d, d)
        proj_bias = arr(d)
        ab = arr(2)
        params = EncoderParams(
            vocab=vocab,
            emb=emb,
            proj=proj,
            proj_bias=proj_bias,
            a=float(ab[0]),
            b=float(ab[1]),
            bow_src_w=arr(d, v),
            bow_src_b=arr(v),
            bow_tgt_w=arr(d, v),
            bow_tgt_b=arr(v),
        )
    return params, config_echo


# ---------------------------------------------------------------------------
# estimator facade


class DualEncoder(BaseEstimator):
    """Trainable dual encoder with a fit/transform interface.

    ``fit`` runs :func:`train` with this estimator's hyperparameters;
    ``transform`` maps segments to unit embedding rows.
    """

    def __init__(
        self,
        objective: str = "contrastive",
        dim: int = 64,
        lr: float = 1e-4,
        lr_ab: float = 1e-2,
        epochs: int = 10,
        batch_size: int = 32,
        seed: int = 0,
        m: float = 1.0,
        bow_set_semantics: bool = True,
        bow_weight: float = 1.0,
        momentum: float = 0.0,
        init: EncoderParams | None = None,
    ):
        self.objective = objective
        self.dim = dim
        self.lr = lr
        self.lr_ab = lr_ab
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.m = m
        self.bow_set_semantics = bow_set_semantics
        self.bow_weight = bow_weight
        self.momentum = momentum
        self.init = init

    def _config(self) -> TrainConfig:
        return TrainConfig(
            objective=self.objective,
            lr=self.lr,
            lr_ab=self.lr_ab,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            dim=self.dim,
            m=self.m,
            bow_set_semantics=self.bow_set_semantics,
            bow_weight=self.bow_weight,
            momentum=self.momentum,
        )

    def fit(
        self,
        corpus: ParallelCorpus | None,
        valid_examples: Sequence[TrainingExample],
        train_examples: Sequence[TrainingExample] | None = None,
    ) -> "DualEncoder":
        self.params_, self.history_ = train(
            corpus,
            self._config(),
            valid_examples,
            train_examples=train_examples,
            init=self.init,
        )
        return self

    def transform(self, segments: Sequence[Segment]) -> np.ndarray:
        check_is_fitted(self, "params_")
        return encode_batch(self.params_, segments)
