"""A small dual sentence encoder with hand-derived gradients.

The encoder mean-pools token embeddings, applies one affine layer with a
tanh nonlinearity, and L2-normalizes, so the inner product of two encodings
is their cosine similarity. Four training objectives operate on that
similarity: an in-batch contrastive loss over aligned pairs, a bag-of-words
auxiliary loss predicting the opposite side's token set, a regression loss
pulling a learnable monotone mapping of the cosine onto the edit similarity
of the retrieved candidate, and a pairwise hinge loss with an adaptive
margin proportional to the edit-similarity gap.

Everything is plain numpy; gradients are exact and verified against finite
differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Segment

UNK = "<unk>"

ATANH_CLIP = 1e-6  # atanh diverges at +-1; cosine of identical segments reaches 1


def _tokens(x) -> list[str]:
    return x.tokens if isinstance(x, Segment) else list(x)


@dataclass
class EncoderParams:
    """All trainable state.

    ``a`` and ``b`` are the slope and position of the cosine-to-edit-
    similarity mapping; the two bag-of-words heads are distinct linear
    projections from the sentence embedding to vocabulary logits.
    """

    vocab: dict[str, int]
    emb: np.ndarray          # (V, d) token embeddings
    proj: np.ndarray         # (d, d)
    proj_bias: np.ndarray    # (d,)
    a: float
    b: float
    bow_src_w: np.ndarray    # (d, V) head applied to source encodings
    bow_src_b: np.ndarray    # (V,)
    bow_tgt_w: np.ndarray    # (d, V) head applied to target encodings
    bow_tgt_b: np.ndarray    # (V,)

    @property
    def dim(self) -> int:
        return self.emb.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            vocab=dict(self.vocab),
            emb=self.emb.copy(),
            proj=self.proj.copy(),
            proj_bias=self.proj_bias.copy(),
            a=self.a,
            b=self.b,
            bow_src_w=self.bow_src_w.copy(),
            bow_src_b=self.bow_src_b.copy(),
            bow_tgt_w=self.bow_tgt_w.copy(),
            bow_tgt_b=self.bow_tgt_b.copy(),
        )

    def indices(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.vocab[UNK]
        return np.array([self.vocab.get(t, unk) for t in tokens], dtype=np.int64)


@dataclass
class EncoderGrads:
    """Gradient accumulator shaped like :class:`EncoderParams`."""

    emb: np.ndarray
    proj: np.ndarray
    proj_bias: np.ndarray
    a: float
    b: float
    bow_src_w: np.ndarray
    bow_src_b: np.ndarray
    bow_tgt_w: np.ndarray
    bow_tgt_b: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "EncoderGrads":
        return cls(
            emb=np.zeros_like(params.emb),
            proj=np.zeros_like(params.proj),
            proj_bias=np.zeros_like(params.proj_bias),
            a=0.0,
            b=0.0,
            bow_src_w=np.zeros_like(params.bow_src_w),
            bow_src_b=np.zeros_like(params.bow_src_b),
            bow_tgt_w=np.zeros_like(params.bow_tgt_w),
            bow_tgt_b=np.zeros_like(params.bow_tgt_b),
        )

    def add(self, other: "EncoderGrads") -> None:
        self.emb += other.emb
        self.proj += other.proj
        self.proj_bias += other.proj_bias
        self.a += other.a
        self.b += other.b
        self.bow_src_w += other.bow_src_w
        self.bow_src_b += other.bow_src_b
        self.bow_tgt_w += other.bow_tgt_w
        self.bow_tgt_b += other.bow_tgt_b

    def scale(self, factor: float) -> None:
        self.emb *= factor
        self.proj *= factor
        self.proj_bias *= factor
        self.a *= factor
        self.b *= factor
        self.bow_src_w *= factor
        self.bow_src_b *= factor
        self.bow_tgt_w *= factor
        self.bow_tgt_b *= factor


def build_vocab(segments: Sequence[Segment], min_count: int = 1) -> dict[str, int]:
    """Token-to-index map over a corpus, with the unknown token at index 0."""
    counts: dict[str, int] = {}
    for seg in segments:
        for tok in seg.tokens:
            counts[tok] = counts.get(tok, 0) + 1
    vocab = {UNK: 0}
    for tok in sorted(counts):
        if counts[tok] >= min_count and tok != UNK:
            vocab[tok] = len(vocab)
    return vocab


def init_params(vocab: dict[str, int], dim: int = 64, seed: int = 0) -> EncoderParams:
    """Random initialization; ``a`` starts at 1 so the mapping is increasing."""
    if UNK not in vocab or vocab[UNK] != 0:
        raise ValueError(f"vocab must map {UNK!r} to index 0")
    rng = np.random.default_rng(seed)
    v = len(vocab)
    scale = 1.0 / math.sqrt(dim)
    return EncoderParams(
        vocab=dict(vocab),
        emb=rng.normal(0.0, scale, size=(v, dim)),
        proj=np.eye(dim) + rng.normal(0.0, 0.1 * scale, size=(dim, dim)),
        proj_bias=np.zeros(dim),
        a=1.0,
        b=0.0,
        bow_src_w=rng.normal(0.0, scale, size=(dim, v)),
        bow_src_b=np.zeros(v),
        bow_tgt_w=rng.normal(0.0, scale, size=(dim, v)),
        bow_tgt_b=np.zeros(v),
    )


# ---------------------------------------------------------------------------
# forward / backward through the encoder


@dataclass
class _BatchCache:
    idx: list[np.ndarray]
    pooled: np.ndarray   # (n, d) mean token embeddings
    squashed: np.ndarray  # (n, d) tanh(pooled @ proj + bias)
    norms: np.ndarray    # (n,)
    encoded: np.ndarray  # (n, d) unit rows


def _forward(params: EncoderParams, token_seqs: Sequence[Sequence[str]]) -> _BatchCache:
    idx = []
    pooled = np.empty((len(token_seqs), params.dim))
    for i, toks in enumerate(token_seqs):
        toks = _tokens(toks)
        if not toks:
            raise ValueError("cannot encode an empty segment")
        ix = params.indices(toks)
        idx.append(ix)
        pooled[i] = params.emb[ix].mean(axis=0)
    squashed = np.tanh(pooled @ params.proj + params.proj_bias)
    norms = np.linalg.norm(squashed, axis=1)
    encoded = squashed / norms[:, None]
    return _BatchCache(idx=idx, pooled=pooled, squashed=squashed, norms=norms, encoded=encoded)


def _backward(
    params: EncoderParams,
    cache: _BatchCache,
    d_encoded: np.ndarray,
    grads: EncoderGrads,
) -> None:
    e = cache.encoded
    d_squashed = (d_encoded - (d_encoded * e).sum(axis=1, keepdims=True) * e) / cache.norms[:, None]
    d_pre = d_squashed * (1.0 - cache.squashed**2)
    grads.proj += cache.pooled.T @ d_pre
    grads.proj_bias += d_pre.sum(axis=0)
    d_pooled = d_pre @ params.proj.T
    for i, ix in enumerate(cache.idx):
        np.add.at(grads.emb, ix, d_pooled[i] / len(ix))


def encode(params: EncoderParams, seg: Segment | Sequence[str]) -> np.ndarray:
    """Unit-normalized sentence embedding. Unknown tokens map to ``<unk>``."""
    return _forward(params, [_tokens(seg)]).encoded[0]


def encode_batch(params: EncoderParams, segs: Sequence[Segment | Sequence[str]]) -> np.ndarray:
    """Stacked unit embeddings, one row per segment."""
    if len(segs) == 0:
        return np.zeros((0, params.dim))
    return _forward(params, [_tokens(s) for s in segs]).encoded


# ---------------------------------------------------------------------------
# cosine-to-edit-similarity mapping


def mapping_f(a: float, b: float, t: float) -> float:
    """Monotone map from cosine in [-1, 1] to (0, 1): sigmoid(a * atanh(t) + b)."""
    t = min(max(t, -1.0 + ATANH_CLIP), 1.0 - ATANH_CLIP)
    return 1.0 / (1.0 + math.exp(-(a * math.atanh(t) + b)))


def _mapping_with_grads(a: float, b: float, t: float) -> tuple[float, float, float, float]:
    """Returns (f, df/da, df/db, df/dt); df/dt is 0 in the clipped region."""
    clipped = not (-1.0 + ATANH_CLIP < t < 1.0 - ATANH_CLIP)
    tc = min(max(t, -1.0 + ATANH_CLIP), 1.0 - ATANH_CLIP)
    ath = math.atanh(tc)
    f = 1.0 / (1.0 + math.exp(-(a * ath + b)))
    sprime = f * (1.0 - f)
    dt = 0.0 if clipped else sprime * a / (1.0 - tc * tc)
    return f, sprime * ath, sprime, dt


# ---------------------------------------------------------------------------
# losses


def regression_example(
    params: EncoderParams,
    x: Segment | Sequence[str],
    candidates: Sequence[tuple[Segment | Sequence[str], float]],
    err_kind: str,
    grads_out: EncoderGrads,
) -> float:
    """Summed regression loss over one example's candidates.

    Encodes the source once, accumulates gradients directly into
    ``grads_out``; this is the training-loop fast path behind
    :func:`loss_regression`.
    """
    if err_kind not in ("MSE", "MAE"):
        raise ValueError(f"err_kind must be 'MSE' or 'MAE', got {err_kind!r}")
    cache = _forward(params, [_tokens(x)] + [_tokens(c) for c, _ in candidates])
    ex = cache.encoded[0]
    ec = cache.encoded[1:]
    sims = ec @ ex
    d_encoded = np.zeros_like(cache.encoded)
    loss = 0.0
    for i, (_, lev_target) in enumerate(candidates):
        f, dfa, dfb, dft = _mapping_with_grads(params.a, params.b, float(sims[i]))
        diff = f - lev_target
        if err_kind == "MSE":
            loss += diff * diff
            dloss_df = 2.0 * diff
        else:
            loss += abs(diff)
            dloss_df = 0.0 if diff == 0.0 else math.copysign(1.0, diff)
        grads_out.a += dloss_df * dfa
        grads_out.b += dloss_df * dfb
        dsim = dloss_df * dft
        d_encoded[0] += dsim * ec[i]
        d_encoded[i + 1] = dsim * ex
    _backward(params, cache, d_encoded, grads_out)
    return loss


def loss_regression(
    params: EncoderParams,
    x: Segment | Sequence[str],
    cand: Segment | Sequence[str],
    lev_target: float,
    err_kind: str = "MSE",
) -> tuple[float, EncoderGrads]:
    """Err(f(cos(x, cand)), lev_target) with gradients for all parameters."""
    grads = EncoderGrads.zeros_like(params)
    loss = regression_example(params, x, [(cand, lev_target)], err_kind, grads)
    return loss, grads


def loss_rank(
    params: EncoderParams,
    x: Segment | Sequence[str],
    candidates: Sequence[tuple[Segment | Sequence[str], float]],
    margin_scale: float = 1.0,
) -> tuple[float, EncoderGrads]:
    """Pairwise hinge loss with margins scaled by the edit-similarity gap.

    ``candidates`` must be sorted by similarity descending (ties allowed);
    anything else raises, rather than silently scoring a different pair set.
    """
    if len(candidates) < 2:
        raise ValueError(f"rank loss needs at least 2 candidates, got {len(candidates)}")
    levs = [lev for _, lev in candidates]
    if any(levs[i] < levs[i + 1] for i in range(len(levs) - 1)):
        raise ValueError("candidates must be sorted by similarity descending")
    seqs = [_tokens(x)] + [_tokens(c) for c, _ in candidates]
    cache = _forward(params, seqs)
    ex = cache.encoded[0]
    ec = cache.encoded[1:]
    sims = ec @ ex
    n = len(candidates)
    loss = 0.0
    dsim = np.zeros(n)
    for i in range(n):          # i is ranked worse (lower lev) than j
        for j in range(i):
            u = sims[i] - sims[j] + margin_scale * abs(levs[i] - levs[j])
            if u > 0.0:
                loss += u
                dsim[i] += 1.0
                dsim[j] -= 1.0
    grads = EncoderGrads.zeros_like(params)
    d_encoded = np.zeros_like(cache.encoded)
    d_encoded[0] = dsim @ ec
    d_encoded[1:] = dsim[:, None] * ex
    _backward(params, cache, d_encoded, grads)
    return float(loss), grads


def loss_contrastive(
    params: EncoderParams,
    batch: Sequence[tuple[Segment | Sequence[str], Segment | Sequence[str]]],
) -> tuple[float, EncoderGrads]:
    """In-batch softmax loss: -sum_i log softmax_j(cos(x_i, y_j))[i].

    Callers should avoid duplicate targets within the batch; duplicated rows
    make the "wrong" targets carry the same content as the right one.
    """
    n = len(batch)
    if n < 2:
        raise ValueError(f"contrastive loss needs a batch of >= 2 pairs, got {n}")
    cx = _forward(params, [_tokens(x) for x, _ in batch])
    cy = _forward(params, [_tokens(y) for _, y in batch])
    scores = cx.encoded @ cy.encoded.T
    shifted = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1)) + scores.max(axis=1)
    loss = float((logz - np.diag(scores)).sum())
    d_scores = np.exp(scores - logz[:, None])
    d_scores[np.arange(n), np.arange(n)] -= 1.0
    grads = EncoderGrads.zeros_like(params)
    _backward(params, cx, d_scores @ cy.encoded, grads)
    _backward(params, cy, d_scores.T @ cx.encoded, grads)
    return loss, grads


def _bow_side(
    head_w: np.ndarray,
    head_b: np.ndarray,
    e: np.ndarray,
    target_idx: np.ndarray,
    counts: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    logits = e @ head_w + head_b
    m = logits.max()
    lse = m + math.log(np.exp(logits - m).sum())
    loss = float(counts @ (lse - logits[target_idx]))
    dlogits = counts.sum() * np.exp(logits - lse)
    np.subtract.at(dlogits, target_idx, counts)
    return loss, np.outer(e, dlogits), dlogits, head_w @ dlogits


def _bag(params: EncoderParams, tokens: Sequence[str], set_semantics: bool) -> tuple[np.ndarray, np.ndarray]:
    idx = params.indices(tokens)
    uniq, counts = np.unique(idx, return_counts=True)
    if set_semantics:
        counts = np.ones_like(counts)
    return uniq, counts.astype(np.float64)


def loss_bow(
    params: EncoderParams,
    x: Segment | Sequence[str],
    y: Segment | Sequence[str],
    set_semantics: bool = True,
) -> tuple[float, EncoderGrads]:
    """Bag-of-words loss: each side's embedding predicts the other side's bag.

    With ``set_semantics`` (the default) every token type counts once;
    otherwise occurrences are counted.
    """
    xt, yt = _tokens(x), _tokens(y)
    if not xt or not yt:
        raise ValueError("bag-of-words loss needs non-empty segments")
    cache = _forward(params, [xt, yt])
    ex, ey = cache.encoded
    y_idx, y_counts = _bag(params, yt, set_semantics)
    x_idx, x_counts = _bag(params, xt, set_semantics)
    loss_x, dwx, dbx, dex = _bow_side(params.bow_src_w, params.bow_src_b, ex, y_idx, y_counts)
    loss_y, dwy, dby, dey = _bow_side(params.bow_tgt_w, params.bow_tgt_b, ey, x_idx, x_counts)
    grads = EncoderGrads.zeros_like(params)
    grads.bow_src_w += dwx
    grads.bow_src_b += dbx
    grads.bow_tgt_w += dwy
    grads.bow_tgt_b += dby
    _backward(params, cache, np.stack([dex, dey]), grads)
    return loss_x + loss_y, grads


# ---------------------------------------------------------------------------
# flat views used by the finite-difference checks and the optimizer


_ARRAY_FIELDS = ("emb", "proj", "proj_bias", "bow_src_w", "bow_src_b", "bow_tgt_w", "bow_tgt_b")


def params_to_vector(params: EncoderParams) -> np.ndarray:
    parts = [getattr(params, f).ravel() for f in _ARRAY_FIELDS]
    parts.append(np.array([params.a, params.b]))
    return np.concatenate(parts)


def set_params_from_vector(params: EncoderParams, vec: np.ndarray) -> None:
    offset = 0
    for f in _ARRAY_FIELDS:
        arr = getattr(params, f)
        arr[...] = vec[offset : offset + arr.size].reshape(arr.shape)
        offset += arr.size
    params.a = float(vec[offset])
    params.b = float(vec[offset + 1])


def grads_to_vector(grads: EncoderGrads) -> np.ndarray:
    parts = [getattr(grads, f).ravel() for f in _ARRAY_FIELDS]
    parts.append(np.array([grads.a, grads.b]))
    return np.concatenate(parts)
