"""Cross-lingual translation-memory retrieval.

Retrieves target-language segments for a source-language query, combining
lexical fuzzy matching (BM25 prefilter + token-level edit similarity),
dense cosine retrieval with a trainable dual encoder, edit-similarity
supervised fine-tuning, and threshold calibration to a target retrieval
rate.
"""

from .bm25 import Bm25Index, bm25_topn, build_bm25, load_bm25, save_bm25
from .calibrate import calibrate_threshold, retrieval_rate
from .corpus import (
    CorpusFormatError,
    MonolingualPool,
    ParallelCorpus,
    Segment,
    decontaminate,
    load_corpus,
    save_corpus,
    split_corpus,
)
from .dense import (
    DenseRetriever,
    VectorIndex,
    build_index,
    knn,
    knn_batch,
    load_index,
    save_index,
)
from .encoder import (
    EncoderParams,
    build_vocab,
    encode,
    encode_batch,
    init_params,
    loss_bow,
    loss_contrastive,
    loss_rank,
    loss_regression,
    mapping_f,
)
from .evaluate import RetrievalReport, build_report, lev_at_1, ndcg, xsim_error
from .fuzzy import FuzzyMatcher, FuzzyMatchResult, fuzzy_match
from .text import Tokenizer, levenshtein_distance, levenshtein_similarity, tokenize
from .training import (
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

__version__ = "0.1.0"
