"""Hierarchical verification of speculative beams, at desk scale."""

__version__ = "0.1.0"

from .baselines import flat_speculative_decode, greedy_decode, multinomial_decode
from .engine import (
    AcceptanceMode,
    FrontierRank,
    HvtConfig,
    StepResult,
    VerificationQueue,
    decode,
    hvt_step,
    residual_sample,
    verify_node,
)
from .models import (
    InterpolatedModel,
    LanguageModel,
    SoftmaxModel,
    TableModel,
    generate_model,
    next_distribution,
    perplexity,
    sequence_logprob,
)
from .report import DecodeReport, StepStats, step_metrics
from .sampling import RandomSource, sample_token
from .tree import (
    DraftMode,
    DraftTree,
    NodeStatus,
    PriorityMode,
    build_draft_tree,
    descendants,
    likelihood,
    path_tokens,
    priority,
)

__all__ = [
    "AcceptanceMode",
    "DecodeReport",
    "DraftMode",
    "DraftTree",
    "FrontierRank",
    "HvtConfig",
    "InterpolatedModel",
    "LanguageModel",
    "NodeStatus",
    "PriorityMode",
    "RandomSource",
    "SoftmaxModel",
    "StepResult",
    "StepStats",
    "TableModel",
    "VerificationQueue",
    "build_draft_tree",
    "decode",
    "descendants",
    "flat_speculative_decode",
    "generate_model",
    "greedy_decode",
    "hvt_step",
    "likelihood",
    "multinomial_decode",
    "next_distribution",
    "path_tokens",
    "perplexity",
    "priority",
    "residual_sample",
    "sample_token",
    "sequence_logprob",
    "step_metrics",
    "verify_node",
]
