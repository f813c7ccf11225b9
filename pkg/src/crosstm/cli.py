"""End-to-end pipeline driver.

Subcommands cover the whole retrieval workflow: ingest (validate, split,
decontaminate), build-lexical-index / build-dense-index, mine-candidates,
train, calibrate, retrieve, eval, and export-examples. Every subcommand is
deterministic given its flags and seed; all outputs embed a config echo and
reload cleanly. Errors exit nonzero with one machine-readable JSON line on
stderr.

The eight retriever names map onto two engines: ``fuzzy-src``,
``fuzzy-gold`` and ``fuzzy-bt`` run the lexical matcher over different
indexed texts (stored sources, stored targets, or user-supplied
back-translations of the pool) and differ in the default query side;
``dense``, ``dense+bow`` and the ``ft-*`` variants run cosine search with a
trained checkpoint, differing only in how the checkpoint was trained.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .bm25 import build_bm25, load_bm25, save_bm25
from .calibrate import calibrate_threshold, retrieval_rate
from .corpus import (
    MonolingualPool,
    ParallelCorpus,
    decontaminate,
    load_corpus,
    save_corpus,
    split_corpus,
)
from .dense import build_index, knn_batch, load_index, save_index
from .encoder import encode_batch
from .evaluate import build_report
from .fuzzy import fuzzy_match
from .text import Tokenizer
from .training import (
    TrainConfig,
    load_checkpoint,
    load_examples,
    load_train_config,
    mine_candidates_dense,
    mine_candidates_lexical,
    save_checkpoint,
    save_examples,
    train,
)

LEXICAL_KINDS = ("fuzzy-src", "fuzzy-gold", "fuzzy-bt")
DENSE_KINDS = ("dense", "dense+bow", "ft-MSE", "ft-MAE", "ft-Rank")
RETRIEVER_KINDS = LEXICAL_KINDS + DENSE_KINDS

DEFAULT_QUERY_SIDE = {
    "fuzzy-src": "src",
    "fuzzy-bt": "src",
    "fuzzy-gold": "tgt",
    **{kind: "src" for kind in DENSE_KINDS},
}


class CliError(ValueError):
    pass


def _tokenizer(args) -> Tokenizer:
    return Tokenizer(lowercase=args.lowercase)


def _load_segments(path, side, tokenizer):
    """Segments from one side of a corpus file (``src``/``tgt``/``text``)."""
    corpus = load_corpus(path, fmt="jsonl", mode="auto", tokenizer=tokenizer)
    if isinstance(corpus, MonolingualPool):
        if side not in (None, "text"):
            raise CliError(f"{path} is monolingual; side {side!r} unavailable")
        return corpus.segments
    if side == "src":
        return corpus.sources
    if side in (None, "tgt"):
        return corpus.targets
    raise CliError(f"{path} is parallel; side must be 'src' or 'tgt', got {side!r}")


def _write_jsonl(path, meta, records):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_meta": meta}, ensure_ascii=False, sort_keys=True) + "\n")
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def _read_jsonl(path):
    meta = {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            if "_meta" in record:
                meta = record["_meta"]
            else:
                records.append(record)
    return meta, records


# ---------------------------------------------------------------------------
# ingest


def cmd_ingest(args) -> None:
    tokenizer = _tokenizer(args)
    corpus = load_corpus(args.input, fmt=args.format, mode=args.mode, tokenizer=tokenizer)
    if args.decontaminate_against:
        if not isinstance(corpus, MonolingualPool):
            raise CliError("--decontaminate-against applies to monolingual pools")
        held = _load_segments(args.decontaminate_against, args.held_out_side, tokenizer)
        corpus = decontaminate(
            corpus,
            held,
            threshold=args.decontamination_threshold,
            prefilter_n=args.prefilter_n,
        )
    if args.split:
        if not isinstance(corpus, ParallelCorpus):
            raise CliError("--split applies to parallel corpora")
        fractions = tuple(float(f) for f in args.split.split(","))
        if len(fractions) != 3:
            raise CliError(f"--split needs three comma-separated fractions, got {args.split!r}")
        if not args.output_prefix:
            raise CliError("--split requires --output-prefix")
        parts = split_corpus(corpus, fractions, seed=args.seed)
        for name, part in zip(("train", "valid", "test"), parts):
            save_corpus(part, f"{args.output_prefix}.{name}.jsonl", fmt="jsonl")
        return
    if not args.output:
        raise CliError("--output is required when not splitting")
    save_corpus(corpus, args.output, fmt="jsonl")


# ---------------------------------------------------------------------------
# index building


def cmd_build_lexical_index(args) -> None:
    segments = _load_segments(args.input, args.side, _tokenizer(args))
    index = build_bm25(segments, k1=args.k1, b=args.b)
    save_bm25(index, args.output)


def cmd_build_dense_index(args) -> None:
    params, _ = load_checkpoint(args.checkpoint)
    segments = _load_segments(args.pool, args.side, _tokenizer(args))
    index = build_index(params, segments)
    save_index(index, args.output)


# ---------------------------------------------------------------------------
# mining and training


def cmd_mine_candidates(args) -> None:
    tokenizer = _tokenizer(args)
    corpus = load_corpus(args.corpus, fmt="jsonl", mode="parallel", tokenizer=tokenizer)
    pool = _load_segments(args.pool, args.pool_side, tokenizer)
    if args.retriever == "lexical":
        examples = mine_candidates_lexical(
            corpus, pool, k=args.k, prefilter_n=args.prefilter_n, exclude_self=args.exclude_self
        )
    else:
        if not args.checkpoint:
            raise CliError("dense mining requires --checkpoint")
        params, _ = load_checkpoint(args.checkpoint)
        examples = mine_candidates_dense(
            params, corpus, pool, k=args.k, exclude_self=args.exclude_self
        )
    meta = {
        "command": "mine-candidates",
        "retriever": args.retriever,
        "k": args.k,
        "corpus": str(args.corpus),
        "pool": str(args.pool),
    }
    save_examples(examples, args.output, meta=meta)


def cmd_train(args) -> None:
    tokenizer = _tokenizer(args)
    config = load_train_config(args.config) if args.config else TrainConfig()
    for key in ("objective", "lr", "lr_ab", "epochs", "batch_size", "seed", "dim", "m", "momentum"):
        value = getattr(args, key)
        if value is not None:
            setattr(config, key, value)
    config.validate()
    corpus = (
        load_corpus(args.corpus, fmt="jsonl", mode="parallel", tokenizer=tokenizer)
        if args.corpus
        else None
    )
    valid_examples = load_examples(args.valid_examples, tokenizer)
    train_examples = load_examples(args.train_examples, tokenizer) if args.train_examples else None
    init = load_checkpoint(args.init_checkpoint)[0] if args.init_checkpoint else None
    params, history = train(
        corpus, config, valid_examples, train_examples=train_examples, init=init
    )
    save_checkpoint(params, args.output, config_echo=config.to_dict())
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            json.dump(history, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# retrieval


def _resolve_query_side(args):
    return args.query_side or DEFAULT_QUERY_SIDE[args.retriever]


def _lexical_searcher(args, tokenizer):
    index = load_bm25(args.index)
    collection = _load_segments(args.collection, args.collection_side, tokenizer)
    if len(collection) != index.n_docs or any(
        s.id != int(i) for s, i in zip(collection, index.ids)
    ):
        raise CliError(
            f"collection {args.collection} does not match index {args.index} "
            f"({len(collection)} vs {index.n_docs} segments)"
        )

    def best_scores(queries):
        out = np.full(len(queries), np.nan)
        for i, q in enumerate(queries):
            hits = fuzzy_match(
                index, collection, q, k=1, prefilter_n=args.prefilter_n,
                threshold=0.0, exclude_self=args.exclude_self,
            ).hits
            if hits:
                out[i] = hits[0][1]
        return out

    def search(queries, threshold):
        if threshold > 1.0:  # a calibrated threshold can exceed the score range
            return [[] for _ in queries]
        return [
            fuzzy_match(
                index, collection, q, k=args.k, prefilter_n=args.prefilter_n,
                threshold=max(threshold, 0.0), exclude_self=args.exclude_self,
            ).hits
            for q in queries
        ]

    return best_scores, search


def _dense_searcher(args, tokenizer):
    if not args.checkpoint:
        raise CliError(f"retriever {args.retriever!r} requires --checkpoint")
    params, _ = load_checkpoint(args.checkpoint)
    index = load_index(args.index)
    if index.dim != params.dim:
        raise CliError(
            f"checkpoint dimension {params.dim} does not match index dimension {index.dim}"
        )

    def encode_queries(queries):
        return encode_batch(params, queries)

    def best_scores(queries):
        hits = knn_batch(
            index, encode_queries(queries), k=1, threshold=-np.inf,
            exclude_ids=[q.id for q in queries] if args.exclude_self else None,
        )
        return np.array([h[0][1] if h else np.nan for h in hits])

    def search(queries, threshold):
        return knn_batch(
            index, encode_queries(queries), k=args.k, threshold=threshold,
            exclude_ids=[q.id for q in queries] if args.exclude_self else None,
        )

    return best_scores, search


def _load_queries(args, tokenizer):
    side = _resolve_query_side(args)
    return _load_segments(args.queries, side, tokenizer), side


def cmd_calibrate(args) -> None:
    tokenizer = _tokenizer(args)
    queries, side = _load_queries(args, tokenizer)
    make = _lexical_searcher if args.retriever in LEXICAL_KINDS else _dense_searcher
    best_scores, _search = make(args, tokenizer)
    scores = best_scores(queries)
    threshold = calibrate_threshold(scores, args.target_rate)
    result = {
        "command": "calibrate",
        "retriever": args.retriever,
        "query_side": side,
        "target_rate": args.target_rate,
        "threshold": threshold,
        "achieved_rate": retrieval_rate(scores, threshold),
        "n_queries": len(queries),
        "index": str(args.index),
    }
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_retrieve(args) -> None:
    tokenizer = _tokenizer(args)
    if args.k < 1:
        raise CliError(f"k must be >= 1, got {args.k}")
    given = [
        name
        for name, value in (
            ("--threshold", args.threshold),
            ("--calibration", args.calibration),
            ("--target-rate", args.target_rate),
        )
        if value is not None
    ]
    if len(given) != 1:
        raise CliError(
            "exactly one of --threshold, --calibration, --target-rate is required"
            + (f"; got {', '.join(given)}" if given else "")
        )
    queries, side = _load_queries(args, tokenizer)
    make = _lexical_searcher if args.retriever in LEXICAL_KINDS else _dense_searcher
    best_scores, search = make(args, tokenizer)
    if args.threshold is not None:
        threshold = args.threshold
    elif args.calibration is not None:
        with open(args.calibration, encoding="utf-8") as fh:
            threshold = float(json.load(fh)["threshold"])
    else:
        threshold = calibrate_threshold(best_scores(queries), args.target_rate)
    hits = search(queries, threshold)
    meta = {
        "command": "retrieve",
        "retriever": args.retriever,
        "k": args.k,
        "threshold": threshold,
        "query_side": side,
        "queries": str(args.queries),
        "index": str(args.index),
    }
    records = (
        {"query_id": q.id, "hits": [{"id": sid, "score": score} for sid, score in row]}
        for q, row in zip(queries, hits)
    )
    _write_jsonl(args.output, meta, records)


# ---------------------------------------------------------------------------
# evaluation and export


def _hits_by_query(path, n_queries):
    meta, records = _read_jsonl(path)
    table = [[] for _ in range(n_queries)]
    for record in records:
        qid = record["query_id"]
        if not 0 <= qid < n_queries:
            raise CliError(f"hits file references query id {qid} outside 0..{n_queries - 1}")
        table[qid] = [(h["id"], h["score"]) for h in record["hits"]]
    return meta, table


def cmd_eval(args) -> None:
    tokenizer = _tokenizer(args)
    references = _load_segments(args.references, args.references_side, tokenizer)
    pool = _load_segments(args.pool, args.pool_side, tokenizer)
    pool_by_id = {s.id: s for s in pool}
    meta, hits = _hits_by_query(args.hits, len(references))
    for row in hits:
        for sid, _ in row:
            if sid not in pool_by_id:
                raise CliError(f"hits file references pool id {sid} not present in {args.pool}")
    encoder = None
    xsim_corpus = None
    if args.checkpoint and args.xsim_eval:
        encoder, _ = load_checkpoint(args.checkpoint)
        xsim_corpus = load_corpus(args.xsim_eval, fmt="jsonl", mode="parallel", tokenizer=tokenizer)
    report = build_report(hits, references, pool_by_id, encoder=encoder, parallel_eval=xsim_corpus)
    payload = report.to_dict()
    payload["config"] = {
        "command": "eval",
        "hits": str(args.hits),
        "hits_meta": meta,
        "references": str(args.references),
        "pool": str(args.pool),
    }
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.per_query_csv:
        with open(args.per_query_csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_id", "n_hits", "lev_at_1"])
            for qid, (row, lev) in enumerate(zip(hits, report.per_query_lev)):
                writer.writerow([qid, len(row), "" if lev is None else f"{lev:.6f}"])


def cmd_export_examples(args) -> None:
    tokenizer = _tokenizer(args)
    queries = _load_segments(args.queries, args.query_side, tokenizer)
    pool = _load_segments(args.pool, args.pool_side, tokenizer)
    pool_by_id = {s.id: s for s in pool}
    meta, hits = _hits_by_query(args.hits, len(queries))
    records = []
    for q, row in zip(queries, hits):
        examples = []
        for sid, score in row:
            if sid not in pool_by_id:
                raise CliError(f"hits file references pool id {sid} not present in {args.pool}")
            examples.append({"id": sid, "text": pool_by_id[sid].raw, "score": score})
        records.append({"query_id": q.id, "src": q.raw, "examples": examples})
    out_meta = {
        "command": "export-examples",
        "hits": str(args.hits),
        "hits_meta": meta,
        "pool": str(args.pool),
    }
    _write_jsonl(args.output, out_meta, records)


# ---------------------------------------------------------------------------
# parser


def _prefilter(value: str):
    if value.lower() == "none":
        return None
    return int(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosstm",
        description="Cross-lingual translation-memory retrieval pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--lowercase", action="store_true", help="case-fold all tokenized text")

    p = sub.add_parser("ingest", parents=[common], help="load, validate, split, decontaminate")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("jsonl", "tsv"), default="jsonl")
    p.add_argument("--mode", choices=("auto", "parallel", "mono"), default="auto")
    p.add_argument("--output")
    p.add_argument("--split", help="train,valid,test fractions, e.g. 0.8,0.1,0.1")
    p.add_argument("--output-prefix")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decontaminate-against", help="held-out corpus to scrub near-duplicates of")
    p.add_argument("--held-out-side", choices=("src", "tgt", "text"), default=None)
    p.add_argument("--decontamination-threshold", type=float, default=0.9)
    p.add_argument("--prefilter-n", type=_prefilter, default=100)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-lexical-index", parents=[common], help="build a BM25 index file")
    p.add_argument("--input", required=True)
    p.add_argument("--side", choices=("src", "tgt", "text"), default=None)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_build_lexical_index)

    p = sub.add_parser("build-dense-index", parents=[common], help="encode a pool into a vector index")
    p.add_argument("--pool", required=True)
    p.add_argument("--side", choices=("src", "tgt", "text"), default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_build_dense_index)

    p = sub.add_parser("mine-candidates", parents=[common], help="mine training examples with labels")
    p.add_argument("--corpus", required=True, help="parallel corpus providing (x, y) pairs")
    p.add_argument("--pool", required=True)
    p.add_argument("--pool-side", choices=("src", "tgt", "text"), default=None)
    p.add_argument("--retriever", choices=("lexical", "dense"), required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--prefilter-n", type=_prefilter, default=100)
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_mine_candidates)

    p = sub.add_parser("train", parents=[common], help="train or fine-tune the encoder")
    p.add_argument("--corpus", help="parallel training corpus (pair objectives)")
    p.add_argument("--valid-examples", required=True, help="mined examples for validation NDCG")
    p.add_argument("--train-examples", help="mined examples (fine-tuning objectives)")
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--objective")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-ab", dest="lr_ab", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--m", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--init-checkpoint")
    p.add_argument("--output", required=True)
    p.add_argument("--history")
    p.set_defaults(func=cmd_train)

    retrieval_common = argparse.ArgumentParser(add_help=False)
    retrieval_common.add_argument("--retriever", choices=RETRIEVER_KINDS, required=True)
    retrieval_common.add_argument("--index", required=True)
    retrieval_common.add_argument("--collection", help="segments backing a lexical index")
    retrieval_common.add_argument(
        "--collection-side", choices=("src", "tgt", "text"), default=None
    )
    retrieval_common.add_argument("--checkpoint", help="encoder checkpoint (dense retrievers)")
    retrieval_common.add_argument("--queries", required=True)
    retrieval_common.add_argument("--query-side", choices=("src", "tgt", "text"), default=None)
    retrieval_common.add_argument("--prefilter-n", type=_prefilter, default=100)
    retrieval_common.add_argument("--exclude-self", action="store_true")

    p = sub.add_parser(
        "calibrate", parents=[common, retrieval_common],
        help="set the score threshold for a target retrieval rate",
    )
    p.add_argument("--target-rate", type=float, default=0.5)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("retrieve", parents=[common, retrieval_common], help="run retrieval")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--threshold", type=float)
    p.add_argument("--calibration", help="calibration file providing the threshold")
    p.add_argument("--target-rate", type=float, help="self-calibrate on the query set")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", parents=[common], help="score a hits file against references")
    p.add_argument("--hits", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--references-side", choices=("src", "tgt", "text"), default=None)
    p.add_argument("--pool", required=True)
    p.add_argument("--pool-side", choices=("src", "tgt", "text"), default=None)
    p.add_argument("--checkpoint", help="encoder checkpoint enabling the alignment error")
    p.add_argument("--xsim-eval", help="parallel corpus for the alignment error")
    p.add_argument("--per-query-csv")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "export-examples", parents=[common],
        help="write retrieved target texts as generation context",
    )
    p.add_argument("--hits", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--query-side", choices=("src", "tgt", "text"), default=None)
    p.add_argument("--pool", required=True)
    p.add_argument("--pool-side", choices=("src", "tgt", "text"), default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_export_examples)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, EOFError, KeyError) as exc:
        print(json.dumps({"error": str(exc)}, ensure_ascii=False), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
