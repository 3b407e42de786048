"""Evaluation metrics: perplexity, distinct-n, attribute statistics, entropy profiles."""

from __future__ import annotations

import bisect
import math
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import AttributeTarget, InvalidInputError, log_softmax
from .models import AttributeScorer, LogitSource
from .sampler import GenerationRecord


class ShortSequenceWarning(UserWarning):
    """distinct-n was requested but no continuation has n tokens."""


def perplexity(eval_lm: LogitSource, prompt: Sequence[int], continuation: Sequence[int]) -> float:
    """exp(-mean log p) over continuation tokens; the prompt is context only."""
    prompt, continuation = tuple(prompt), tuple(continuation)
    if not continuation:
        raise InvalidInputError("perplexity of an empty continuation is undefined")
    prefixes = [prompt + continuation[:i] for i in range(len(continuation))]
    logits = np.asarray(eval_lm.next_logits(prefixes))
    total = math.fsum(log_softmax(row)[tok] for row, tok in zip(logits, continuation))
    return math.exp(-total / len(continuation))


def distinct_n(continuations: Sequence[Sequence[int]], n: int) -> float:
    """100 * distinct n-grams / total tokens, pooled over ``continuations``.

    Returns 0.0 with a :class:`ShortSequenceWarning` when no continuation is long
    enough to contain an n-gram.
    """
    if n < 1:
        raise InvalidInputError("n must be positive")
    grams = set()
    total = 0
    for seq in continuations:
        seq = tuple(seq)
        total += len(seq)
        grams.update(seq[i : i + n] for i in range(len(seq) - n + 1))
    if not grams:
        warnings.warn(f"no continuation has {n} tokens; distinct-{n} set to 0", ShortSequenceWarning)
        return 0.0
    return 100.0 * len(grams) / total


class AttributeStats(NamedTuple):
    mean_pct: float
    max_pct: float
    prob_pct: float
    positive_pct: float


def attribute_stats(scores: Sequence[Sequence[float]], threshold: float = 0.5) -> AttributeStats:
    """Rows are prompts, entries are per-sample attribute probabilities.

    ``mean_pct`` averages the per-prompt mean scores.
    ``prob_pct`` is the share of prompts with at least one sample above
    ``threshold``; ``positive_pct`` averages the per-prompt share of samples above it.
    """
    rows = [np.asarray(r, dtype=np.float64) for r in scores]
    if not rows:
        raise InvalidInputError("attribute_stats needs at least one prompt")
    if any(r.size == 0 for r in rows):
        raise InvalidInputError("every prompt needs at least one score")
    pooled = np.concatenate(rows)
    if np.any((pooled < 0) | (pooled > 1)):
        raise InvalidInputError("attribute scores must lie in [0, 1]")
    # mean of per-prompt means: equals the pooled mean for equal-size rows and
    # keeps mean <= max when rows are ragged
    mean_pct = 100.0 * float(np.mean([r.mean() for r in rows]))
    max_pct = 100.0 * float(np.mean([r.max() for r in rows]))
    prob_pct = 100.0 * float(np.mean([bool(np.any(r > threshold)) for r in rows]))
    positive_pct = 100.0 * float(np.mean([np.mean(r > threshold) for r in rows]))
    return AttributeStats(mean_pct, max_pct, prob_pct, positive_pct)


@dataclass
class EntropyProfile:
    samples: np.ndarray
    bin_edges: np.ndarray
    bin_counts: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[float], bins: int = 40) -> "EntropyProfile":
        arr = np.sort(np.asarray(samples, dtype=np.float64))
        if arr.size == 0:
            raise InvalidInputError("entropy profile needs at least one sample")
        counts, edges = np.histogram(arr, bins=bins)
        return cls(arr, edges, counts)

    def cdf(self, value: float) -> float:
        """Share of samples <= value."""
        return bisect.bisect_right(self.samples.tolist(), value) / self.samples.size

    def to_dict(self) -> dict:
        return {
            "samples": self.samples.tolist(),
            "bin_edges": self.bin_edges.tolist(),
            "bin_counts": self.bin_counts.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EntropyProfile":
        samples = np.asarray(obj["samples"], dtype=np.float64)
        if samples.size == 0 or np.any(np.diff(samples) < 0):
            raise InvalidInputError("entropy samples must be non-empty and sorted")
        return cls(samples, np.asarray(obj["bin_edges"]), np.asarray(obj["bin_counts"]))


def entropy_quantile_threshold(profile: EntropyProfile, guided_fraction: float) -> float:
    """Smallest recorded entropy e with share{H > e} <= guided_fraction.

    ``guided_fraction == 1`` returns 0.0 so that every positive-entropy step is guided.
    """
    if not 0.0 <= guided_fraction <= 1.0:
        raise InvalidInputError("guided_fraction must lie in [0, 1]")
    if guided_fraction >= 1.0:
        return 0.0
    samples = profile.samples.tolist()
    n = len(samples)
    for e in samples:
        above = n - bisect.bisect_right(samples, e)
        if above <= guided_fraction * n:
            return float(e)
    return float(samples[-1])


def cdf_table(profile: EntropyProfile, fractions: Sequence[float] | None = None) -> list[tuple[float, float]]:
    """(guided fraction, threshold) pairs, 0.0 to 1.0 in steps of 0.05 by default."""
    if fractions is None:
        fractions = [i / 20 for i in range(21)]
    return [(float(f), entropy_quantile_threshold(profile, f)) for f in fractions]


@dataclass
class MetricsReport:
    ppl: float
    dist_n: dict[int, float]
    attr_mean_pct: float
    attr_max_pct: float
    attr_prob_pct: float
    num_prompts: int
    samples_per_prompt: int

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dist_n"] = {str(k): v for k, v in self.dist_n.items()}
        return out

    def render_table(self, name: str = "CAIF", label: str = "attr.") -> str:
        headers = [
            "Sampling", "PPL", f"mean {label}", f"max {label}", f"{label} prob.",
            "dist 1", "dist 2", "dist 3",
        ]
        values = [
            name,
            f"{self.ppl:.1f}",
            f"{self.attr_mean_pct:.1f}",
            f"{self.attr_max_pct:.1f}",
            f"{self.attr_prob_pct:.1f}",
            *(f"{self.dist_n.get(n, float('nan')):.1f}" for n in (1, 2, 3)),
        ]
        widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
        line = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
        rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        return "\n".join([line(headers), rule, line(values)])


def build_report(
    groups: Sequence[Sequence[GenerationRecord]],
    eval_lm: LogitSource,
    eval_scorer: AttributeScorer,
    target: AttributeTarget,
    scope: str = "continuation",
    threshold: float = 0.5,
) -> MetricsReport:
    """Aggregate a run where ``groups[i]`` holds the samples for prompt i.

    PPL is the mean of per-continuation PPLs (empty continuations skipped);
    distinct-n is pooled within a prompt and averaged over prompts. ``scope``
    chooses whether the attribute scorer sees the continuation or prompt + continuation.
    """
    if scope not in ("continuation", "full"):
        raise InvalidInputError(f"unknown attribute scope {scope!r}")
    if not groups or any(len(g) == 0 for g in groups):
        raise InvalidInputError("report needs at least one prompt with samples")
    ppls = [
        perplexity(eval_lm, r.prompt, r.continuation)
        for g in groups
        for r in g
        if r.continuation
    ]
    ppl = float(np.mean(ppls)) if ppls else float("nan")
    dist = {}
    for n in (1, 2, 3):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ShortSequenceWarning)
            dist[n] = float(np.mean([distinct_n([r.continuation for r in g], n) for g in groups]))
    rows = []
    for g in groups:
        seqs = [
            tuple(r.continuation) if scope == "continuation" else tuple(r.prompt) + tuple(r.continuation)
            for r in g
        ]
        rows.append(np.asarray(eval_scorer.score_batch(seqs, target), dtype=np.float64))
    stats = attribute_stats(rows, threshold)
    return MetricsReport(
        ppl=ppl,
        dist_n=dist,
        attr_mean_pct=stats.mean_pct,
        attr_max_pct=stats.max_pct,
        attr_prob_pct=stats.prob_pct,
        num_prompts=len(groups),
        samples_per_prompt=max(len(g) for g in groups),
    )
