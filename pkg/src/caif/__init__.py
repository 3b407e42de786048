"""Classifier-guided sampling for any next-token model and sequence classifier."""

from .core import (
    AttributeTarget,
    GuidanceConfig,
    GuidanceMode,
    InvalidInputError,
    RandomStream,
    StepCriterion,
    Vocabulary,
    entropy_nats,
    log_softmax,
    splitmix64_mix,
    top_m,
)
from .models import (
    AttributeScorer,
    LexiconScorer,
    LogitSource,
    TableLM,
    TableScorer,
    TrigramLM,
    train_trigram,
)
from .oracle import exact_sequence_distribution, exact_step_distribution
from .sampler import (
    GenerationRecord,
    StepTrace,
    caif_step,
    combine_scores,
    generate,
    guided_step_distribution,
    should_guide,
)

__version__ = "0.1.0"

__all__ = [
    "AttributeTarget",
    "GuidanceConfig",
    "GuidanceMode",
    "InvalidInputError",
    "RandomStream",
    "StepCriterion",
    "Vocabulary",
    "entropy_nats",
    "log_softmax",
    "splitmix64_mix",
    "top_m",
    "AttributeScorer",
    "LexiconScorer",
    "LogitSource",
    "TableLM",
    "TableScorer",
    "TrigramLM",
    "train_trigram",
    "exact_sequence_distribution",
    "exact_step_distribution",
    "GenerationRecord",
    "StepTrace",
    "caif_step",
    "combine_scores",
    "generate",
    "guided_step_distribution",
    "should_guide",
]
