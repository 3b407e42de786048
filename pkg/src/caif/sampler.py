"""Classifier-guided sampling: top-j candidates are re-scored with an attribute
classifier, then the next token is drawn from the top-k re-weighted candidates."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    AttributeTarget,
    CriterionKind,
    GuidanceConfig,
    GuidanceMode,
    InvalidInputError,
    RandomStream,
    StepCriterion,
    entropy_nats,
    log_softmax,
)
from .models import AttributeScorer, LogitSource

__all__ = [
    "StepError",
    "GenerationError",
    "StopReason",
    "StepTrace",
    "GenerationRecord",
    "SparseDistribution",
    "should_guide",
    "combine_scores",
    "plain_topk_distribution",
    "guided_step_distribution",
    "caif_step",
    "generate",
]


class StepError(RuntimeError):
    def __init__(self, step_index: int, message: str):
        super().__init__(f"step {step_index}: {message}")
        self.step_index = step_index


class GenerationError(RuntimeError):
    """A step failed; ``record`` holds everything generated before the failure."""

    def __init__(self, record: "GenerationRecord", cause: StepError):
        super().__init__(str(cause))
        self.record = record
        self.step_index = cause.step_index


class StopReason(str, enum.Enum):
    EOS = "eos"
    MAX_TOKENS = "max_tokens"


@dataclass
class StepTrace:
    step_index: int
    entropy_nats: float
    guided: bool
    candidate_ids: list[int]
    base_logprobs: list[float]
    class_probs: list[float] | None
    combined_scores: list[float] | None
    sampled_id: int

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "entropy_nats": self.entropy_nats,
            "guided": self.guided,
            "candidate_ids": self.candidate_ids,
            "base_logprobs": self.base_logprobs,
            "class_probs": self.class_probs,
            "combined_scores": self.combined_scores,
            "sampled_id": self.sampled_id,
        }


@dataclass
class GenerationRecord:
    prompt: tuple[int, ...]
    continuation: tuple[int, ...]
    traces: list[StepTrace]
    seed: int
    config: GuidanceConfig
    stopped_by: StopReason | None

    @property
    def guided_steps(self) -> int:
        return sum(t.guided for t in self.traces)

    def to_dict(self, emit_traces: bool = True) -> dict:
        out = {
            "prompt": list(self.prompt),
            "continuation": list(self.continuation),
            "seed": self.seed,
            "config": self.config.to_dict(),
            "stopped_by": self.stopped_by.value if self.stopped_by else None,
        }
        if emit_traces:
            out["traces"] = [t.to_dict() for t in self.traces]
        return out


@dataclass(frozen=True)
class SparseDistribution:
    """Probabilities over ``ids``, listed by score descending (ties: ascending id)."""

    ids: tuple[int, ...]
    probs: np.ndarray
    scores: np.ndarray = field(repr=False)

    def dense(self, vocab_size: int) -> np.ndarray:
        out = np.zeros(vocab_size)
        out[list(self.ids)] = self.probs
        return out

    def sample(self, u: float) -> int:
        """Inverse-CDF walk in listed order using one uniform value in [0, 1)."""
        cum = 0.0
        last = self.ids[0]
        for tok, p in zip(self.ids, self.probs.tolist()):
            if p > 0.0:
                cum += p
                last = tok
                if u < cum:
                    return tok
        # u landed in the rounding gap above the accumulated mass
        return last


def should_guide(criterion: StepCriterion, step_index: int, entropy: float) -> bool:
    if criterion.kind is CriterionKind.ALWAYS:
        return True
    if criterion.kind is CriterionKind.PERIODIC:
        return step_index % criterion.period == 0
    return entropy > criterion.threshold_nats


def combine_scores(
    base_logprobs: Sequence[float],
    class_probs: Sequence[float],
    mode: GuidanceMode,
    alpha: float,
    eps: float = 1e-7,
) -> np.ndarray:
    lp = np.asarray(base_logprobs, dtype=np.float64)
    pc = np.asarray(class_probs, dtype=np.float64)
    if lp.shape != pc.shape:
        raise InvalidInputError(
            f"length mismatch: {lp.size} log-probabilities vs {pc.size} class probabilities"
        )
    pc = np.clip(pc, eps, 1.0 - eps)
    mode = GuidanceMode.parse(mode)
    if mode is GuidanceMode.LOG_PROB:
        return lp + alpha * np.log(pc)
    return lp + alpha * np.log1p(-pc)


def _rank(scores: np.ndarray, ids: np.ndarray, m: int) -> np.ndarray:
    order = np.lexsort((ids, -scores))
    return order[:m]


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = np.exp(scores - scores.max())
    return z / z.sum()


def plain_topk_distribution(base_logprobs: np.ndarray, top_k: int) -> SparseDistribution:
    lp = np.asarray(base_logprobs, dtype=np.float64)
    ids = np.arange(lp.size)
    keep = _rank(lp, ids, min(top_k, lp.size))
    scores = lp[keep]
    return SparseDistribution(tuple(ids[keep].tolist()), _softmax(scores), scores)


def _scoring_inputs(prefix, candidates, config, prompt_len):
    base = tuple(prefix) if config.include_prompt_in_classifier_input else tuple(prefix[prompt_len:])
    return [base + (int(c),) for c in candidates]


def _check_class_probs(probs, expected: int) -> np.ndarray:
    pc = np.asarray(probs, dtype=np.float64)
    if pc.shape != (expected,):
        raise InvalidInputError(f"scorer returned {pc.size} probabilities for {expected} sequences")
    if not np.all((pc >= 0.0) & (pc <= 1.0)):
        raise InvalidInputError("scorer returned probabilities outside [0, 1]")
    return pc


@dataclass
class _GuidedStep:
    candidates: np.ndarray
    candidate_logprobs: np.ndarray
    class_probs: np.ndarray
    combined: np.ndarray
    dist: SparseDistribution


def _guided(prefix, base_lp, scorer, target, config, prompt_len) -> _GuidedStep:
    vocab_ids = np.arange(base_lp.size)
    j = min(config.top_j, base_lp.size)
    k = min(config.top_k, j)
    cand = vocab_ids[_rank(base_lp, vocab_ids, j)]
    cand_lp = base_lp[cand]
    pc = _check_class_probs(
        scorer.score_batch(_scoring_inputs(prefix, cand, config, prompt_len), target), j
    )
    combined = combine_scores(cand_lp, pc, config.mode, config.alpha, config.prob_clamp_epsilon)
    keep = _rank(combined, cand, k)
    scores = combined[keep]
    dist = SparseDistribution(tuple(cand[keep].tolist()), _softmax(scores), scores)
    return _GuidedStep(cand, cand_lp, pc, combined, dist)


def _base_logprobs(lm: LogitSource, prefix, temperature: float) -> np.ndarray:
    logits = np.asarray(lm.next_logits([tuple(prefix)]))
    if logits.shape != (1, lm.vocabulary.size):
        raise InvalidInputError(f"logit source returned shape {logits.shape}")
    return log_softmax(logits[0], temperature)


def guided_step_distribution(
    prefix: Sequence[int],
    lm: LogitSource,
    scorer: AttributeScorer,
    target: AttributeTarget,
    config: GuidanceConfig,
    prompt_len: int = 0,
) -> SparseDistribution:
    """Re-weighted top-k distribution for the next token after ``prefix``.

    ``prompt_len`` marks how many leading ids of ``prefix`` are prompt; they are
    dropped from the classifier input when the config excludes the prompt.
    """
    base_lp = _base_logprobs(lm, prefix, config.temperature)
    return _guided(prefix, base_lp, scorer, target, config, prompt_len).dist


def caif_step(
    prefix: Sequence[int],
    lm: LogitSource,
    scorer: AttributeScorer,
    target: AttributeTarget,
    config: GuidanceConfig,
    step_index: int,
    rng: RandomStream,
    prompt_len: int = 0,
) -> tuple[int, StepTrace]:
    try:
        base_lp = _base_logprobs(lm, prefix, config.temperature)
        h = entropy_nats(base_lp)
        u = rng.next_unit()
        if should_guide(config.criterion, step_index, h):
            g = _guided(prefix, base_lp, scorer, target, config, prompt_len)
            tok = g.dist.sample(u)
            trace = StepTrace(
                step_index=step_index,
                entropy_nats=h,
                guided=True,
                candidate_ids=g.candidates.tolist(),
                base_logprobs=g.candidate_logprobs.tolist(),
                class_probs=g.class_probs.tolist(),
                combined_scores=g.combined.tolist(),
                sampled_id=tok,
            )
        else:
            dist = plain_topk_distribution(base_lp, config.top_k)
            tok = dist.sample(u)
            trace = StepTrace(
                step_index=step_index,
                entropy_nats=h,
                guided=False,
                candidate_ids=list(dist.ids),
                base_logprobs=dist.scores.tolist(),
                class_probs=None,
                combined_scores=None,
                sampled_id=tok,
            )
    except StepError:
        raise
    except Exception as exc:
        raise StepError(step_index, f"{type(exc).__name__}: {exc}") from exc
    return tok, trace


def generate(
    prompt: Sequence[int],
    lm: LogitSource,
    scorer: AttributeScorer,
    target: AttributeTarget,
    config: GuidanceConfig,
    seed: int,
) -> GenerationRecord:
    vocab = lm.vocabulary
    prompt = tuple(int(t) for t in prompt)
    for t in prompt:
        if not 0 <= t < vocab.size:
            raise InvalidInputError(f"prompt token {t} outside vocabulary of size {vocab.size}")
    rng = RandomStream(seed)
    seq = list(prompt)
    traces: list[StepTrace] = []
    stopped_by = StopReason.MAX_TOKENS
    for step in range(config.max_new_tokens):
        try:
            tok, trace = caif_step(seq, lm, scorer, target, config, step, rng, len(prompt))
        except StepError as err:
            partial = GenerationRecord(
                prompt, tuple(seq[len(prompt):]), traces, seed, config, None
            )
            raise GenerationError(partial, err) from err
        seq.append(tok)
        traces.append(trace)
        if tok == vocab.eos_id:
            stopped_by = StopReason.EOS
            break
    return GenerationRecord(prompt, tuple(seq[len(prompt):]), traces, seed, config, stopped_by)

