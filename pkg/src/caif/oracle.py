"""Brute-force reference for the re-weighted next-token distribution.

Everything here is computed over the full vocabulary with no truncation and in
plain Python floats. It deliberately shares no scoring code with the sampler so
the two can be checked against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import AttributeTarget, GuidanceConfig, GuidanceMode, InvalidInputError
from .models import AttributeScorer, LogitSource

MAX_ORACLE_VOCAB = 4096
MAX_ENUMERATION = 10**6


@dataclass(frozen=True)
class ExactDistribution:
    probs: np.ndarray

    def __post_init__(self):
        if np.any(self.probs < 0) or abs(math.fsum(self.probs) - 1.0) > 1e-12:
            raise InvalidInputError("exact distribution is not normalized")


def _logsumexp(xs: Sequence[float]) -> float:
    m = max(xs)
    return m + math.log(math.fsum(math.exp(x - m) for x in xs))


def _guidance_term(p: float, alpha: float, mode: GuidanceMode, eps: float) -> float:
    if p < eps:
        p = eps
    elif p > 1.0 - eps:
        p = 1.0 - eps
    if mode is GuidanceMode.LOG_PROB:
        return alpha * math.log(p)
    return alpha * math.log(1.0 - p)


def _exact_logprobs(
    prefix, lm, scorer, target, alpha, mode, eps, temperature, scoring_prefix
) -> list[float]:
    vocab_size = lm.vocabulary.size
    if vocab_size > MAX_ORACLE_VOCAB:
        raise InvalidInputError(
            f"vocabulary of {vocab_size} exceeds the oracle limit of {MAX_ORACLE_VOCAB}"
        )
    row = [float(x) / temperature for x in lm.next_logits([tuple(prefix)])[0]]
    log_z = _logsumexp(row)
    base = [x - log_z for x in row]
    if alpha == 0:
        weights = base
    else:
        seqs = [tuple(scoring_prefix) + (t,) for t in range(vocab_size)]
        probs = [float(p) for p in scorer.score_batch(seqs, target)]
        weights = [b + _guidance_term(p, alpha, mode, eps) for b, p in zip(base, probs)]
    log_norm = _logsumexp(weights)
    return [w - log_norm for w in weights]


def exact_step_distribution(
    prefix: Sequence[int],
    lm: LogitSource,
    scorer: AttributeScorer,
    target: AttributeTarget,
    alpha: float,
    mode: GuidanceMode | str = GuidanceMode.LOG_PROB,
    eps: float = 1e-7,
    temperature: float = 1.0,
    scoring_prefix: Sequence[int] | None = None,
) -> ExactDistribution:
    """p(t | prefix, c) proportional to p(t | prefix) * g(p_c(prefix + t)) ** alpha for
    every token t, where g is the identity or 1 - p depending on ``mode``.

    ``scoring_prefix`` replaces ``prefix`` as the classifier input (e.g. without
    the prompt); by default the classifier sees ``prefix``.
    """
    mode = GuidanceMode.parse(mode)
    if scoring_prefix is None:
        scoring_prefix = prefix
    logp = _exact_logprobs(
        prefix, lm, scorer, target, alpha, mode, eps, temperature, scoring_prefix
    )
    return ExactDistribution(np.array([math.exp(x) for x in logp]))


def exact_sequence_distribution(
    prompt: Sequence[int],
    lm: LogitSource,
    scorer: AttributeScorer,
    target: AttributeTarget,
    config: GuidanceConfig,
    horizon: int,
) -> dict[tuple[int, ...], float]:
    """Probability of every continuation of length <= ``horizon``.

    Paths stop early at EOS. The config's truncation settings and step criterion
    are ignored: every step is re-weighted over the whole vocabulary.
    """
    vocab = lm.vocabulary
    if horizon < 0:
        raise InvalidInputError("horizon must be non-negative")
    if vocab.size**horizon > MAX_ENUMERATION:
        raise InvalidInputError(
            f"|V|^horizon = {vocab.size}^{horizon} exceeds the enumeration budget of {MAX_ENUMERATION}"
        )
    prompt = tuple(int(t) for t in prompt)
    out: dict[tuple[int, ...], float] = {}

    def walk(cont: tuple[int, ...], logp: float) -> None:
        if len(cont) == horizon or (cont and cont[-1] == vocab.eos_id):
            out[cont] = math.exp(logp)
            return
        prefix = prompt + cont
        scoring = prefix if config.include_prompt_in_classifier_input else cont
        step = _exact_logprobs(
            prefix,
            lm,
            scorer,
            target,
            config.alpha,
            config.mode,
            config.prob_clamp_epsilon,
            config.temperature,
            scoring,
        )
        for tok, lp in enumerate(step):
            # zero-mass branches may lead to prefixes a table model does not define
            if math.exp(logp + lp) > 0.0:
                walk(cont + (tok,), logp + lp)

    walk((), 0.0)
    return out
