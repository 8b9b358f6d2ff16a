"""Staged builder for reasoning SFT datasets.

Question corpora move through a fixed pipeline: source, filter, dedup,
annotate, verify, decontaminate, mix. Each stage is importable on its own;
the pipeline module composes them from a declarative recipe and keeps a
conserving ledger of what every stage consumed and kept.
"""

from .corpus import (
    AnswerSample,
    DatasetManifest,
    GenerationConfig,
    QuestionRecord,
    StageEntry,
    format_chat,
    read_shards,
    write_shards,
)
from .errors import (
    AuthError,
    ConfigError,
    LedgerError,
    StageError,
    TransportError,
)
from .pipeline import PipelineConfig, StageSpec, backsolve_targets, report, run
from .textsim import (
    TokenizerSpec,
    bounded_indel_at_least,
    indel_similarity,
    lcs_length,
    ngram_hashes,
    tokenize,
)

__version__ = "0.1.0"

__all__ = [
    "AnswerSample",
    "AuthError",
    "ConfigError",
    "DatasetManifest",
    "GenerationConfig",
    "LedgerError",
    "PipelineConfig",
    "QuestionRecord",
    "StageEntry",
    "StageSpec",
    "StageError",
    "TokenizerSpec",
    "TransportError",
    "__version__",
    "backsolve_targets",
    "bounded_indel_at_least",
    "format_chat",
    "indel_similarity",
    "lcs_length",
    "ngram_hashes",
    "read_shards",
    "report",
    "run",
    "tokenize",
    "write_shards",
]
