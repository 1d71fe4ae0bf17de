"""Tokenizer-free byte-level language modeling toolkit.

Train a causal transformer over raw utf-8 bytes, score corpora with strided
windowed prediction, convert bits-per-byte to word perplexity, and probe
intermediate layers for word-level semantics.
"""

from .corpus import (
    CorpusLayoutError,
    CorpusStats,
    RawCorpus,
    WindowBatch,
    corpus_stats,
    load_corpus,
    sample_windows,
    select_split,
)
from .evaluation import (
    ScoreReport,
    bits_per_word_to_bpb,
    bpb_to_ppl,
    windowed_score,
)
from .model import (
    ActivationTrace,
    ByteTransformer,
    ModelConfig,
    count_parameters,
    init_parameters,
    parameter_shapes,
)
from .probe import (
    DatasetScore,
    LayerSweepTable,
    WordPair,
    WordSimDataset,
    cosine_similarity,
    evaluate_dataset,
    extract_word_representation,
    layer_sweep,
    load_word_pairs,
    spearman_rho,
)
from .training import (
    Checkpoint,
    CheckpointConsistencyError,
    CheckpointError,
    CheckpointFormatError,
    CheckpointIntegrityError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    OptimizerState,
    TrainConfig,
    adam_update,
    bits_per_byte_loss,
    desk_model_config,
    desk_train_config,
    gradient_check,
    init_optimizer,
    learning_rate,
    load_checkpoint,
    run_training,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"
