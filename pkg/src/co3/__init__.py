"""co3: joint code retrieval, summarization, and generation.

A dual pair of attention seq2seq models (code->query and query->code) shares
its LSTM cells across tasks, is coupled by a probabilistic-duality
regularizer fed by frozen per-side language models, and drives a cosine
retrieval scorer trained with a hinge ranking loss. Everything runs on a
small tape-based numpy autodiff.
"""

from .corpus import (
    Batch,
    CorpusSplits,
    PairExample,
    Vocab,
    build_vocab,
    encode,
    make_batch,
    prepare_splits,
    read_pairs,
    sample_negatives,
    split_corpus,
    tokenize,
)
from .seq2seq import Co3Model, SharedCellRegistry, lstm_step
from .lm import LanguageModel, perplexity, pretrain_lm, sequence_log_marginal
from .dual import DualityInputs, batch_dual_loss, dual_regularizer
from .retrieval import pool_states, pooling_attribution, rank_candidates, ranking_loss, score
from .metrics import bleu4, meteor, mrr, ndcg, paired_bootstrap_mrr
from .evaluate import (
    EvalReport,
    bleu_bucket_analysis,
    evaluate_model,
    evaluate_retrieval,
    evaluate_summarization,
)
from .train import (
    AdamOptimizer,
    Checkpoint,
    TrainConfig,
    algorithm1_step,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
