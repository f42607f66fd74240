"""Training stack: data, optimizer, FLOPs accounting, checkpoints, runner."""

from .adamw import AdamW
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Corpus, ingest_corpus, load_corpus_file, synthesize_corpus
from .flops import (
    flops_per_step,
    forward_flops,
    loop_overhead_ratio,
    paper_shaped_config,
)
from .runconfig import (
    ABLATION_ARMS,
    VARIANTS,
    TrainSettings,
    parse_config_text,
    settings_from_pairs,
)
from .runner import (
    RestoredRun,
    TrainingAbort,
    TrainResult,
    evaluate_perplexity,
    long_context_eval,
    restore_model,
    train,
)

__all__ = [
    "ABLATION_ARMS",
    "AdamW",
    "CheckpointError",
    "Corpus",
    "RestoredRun",
    "TrainResult",
    "TrainSettings",
    "TrainingAbort",
    "VARIANTS",
    "evaluate_perplexity",
    "flops_per_step",
    "forward_flops",
    "ingest_corpus",
    "load_checkpoint",
    "load_corpus_file",
    "long_context_eval",
    "loop_overhead_ratio",
    "paper_shaped_config",
    "parse_config_text",
    "restore_model",
    "save_checkpoint",
    "settings_from_pairs",
    "synthesize_corpus",
    "train",
]
