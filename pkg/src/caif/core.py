"""Shared types, log-space numerics and the reproducible random stream."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "InvalidInputError",
    "Vocabulary",
    "AttributeTarget",
    "GuidanceMode",
    "StepCriterion",
    "GuidanceConfig",
    "RandomStream",
    "splitmix64_mix",
    "log_softmax",
    "entropy_nats",
    "top_m",
    "as_token_seq",
    "ZERO_PROB_LOGIT",
]

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# Finite stand-in for log(0); exp() of it underflows to exactly 0.0 at any sane temperature.
ZERO_PROB_LOGIT = -1e30


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


TokenSeq = tuple  # tuple[int, ...]


def as_token_seq(ids: Iterable[int], vocab_size: int | None = None) -> tuple[int, ...]:
    seq = tuple(int(i) for i in ids)
    if vocab_size is not None:
        for i in seq:
            if not 0 <= i < vocab_size:
                raise InvalidInputError(f"token id {i} outside vocabulary of size {vocab_size}")
    return seq


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    eos_id: int
    bos_id: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if len(tokens) < 2:
            raise InvalidInputError("vocabulary needs at least two tokens")
        index = {tok: i for i, tok in enumerate(tokens)}
        if len(index) != len(tokens):
            raise InvalidInputError("vocabulary tokens must be unique")
        if self.eos_id == self.bos_id:
            raise InvalidInputError("eos_id and bos_id must differ")
        for name in ("eos_id", "bos_id"):
            if not 0 <= getattr(self, name) < len(tokens):
                raise InvalidInputError(f"{name} out of range")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise InvalidInputError(f"unknown token {token!r}") from None

    def encode(self, text: str) -> tuple[int, ...]:
        """Whitespace tokenization; unknown tokens are an error."""
        return tuple(self.id_of(tok) for tok in text.split())

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"tokens": list(self.tokens), "eos_id": self.eos_id, "bos_id": self.bos_id},
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "eos_id": self.eos_id, "bos_id": self.bos_id}

    @classmethod
    def from_dict(cls, obj: dict) -> "Vocabulary":
        return cls(tuple(obj["tokens"]), int(obj["eos_id"]), int(obj["bos_id"]))


@dataclass(frozen=True)
class AttributeTarget:
    """Names the attribute the scorer predicts. Polarity is informational only;
    the steering direction comes from the sign of alpha and the guidance mode."""

    class_label: str
    polarity: str = "avoid"

    def __post_init__(self):
        if not self.class_label:
            raise InvalidInputError("class_label must be non-empty")
        if self.polarity not in ("avoid", "attract"):
            raise InvalidInputError(f"polarity must be 'avoid' or 'attract', got {self.polarity!r}")


class GuidanceMode(str, enum.Enum):
    LOG_PROB = "log_prob"
    LOG_ONE_MINUS_PROB = "log_one_minus_prob"

    @classmethod
    def parse(cls, value: "str | GuidanceMode") -> "GuidanceMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "logprob": cls.LOG_PROB,
            "log_prob": cls.LOG_PROB,
            "logoneminusprob": cls.LOG_ONE_MINUS_PROB,
            "log_one_minus_prob": cls.LOG_ONE_MINUS_PROB,
            "inverse": cls.LOG_ONE_MINUS_PROB,
        }
        try:
            return aliases[key]
        except KeyError:
            raise InvalidInputError(f"unknown guidance mode {value!r}") from None


class CriterionKind(str, enum.Enum):
    ALWAYS = "always"
    PERIODIC = "periodic"
    ENTROPY = "entropy"


@dataclass(frozen=True)
class StepCriterion:
    kind: CriterionKind = CriterionKind.ALWAYS
    period: int = 1
    threshold_nats: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", CriterionKind(self.kind))
        if self.kind is CriterionKind.PERIODIC and self.period < 1:
            raise InvalidInputError("period must be a positive integer")
        if self.kind is CriterionKind.ENTROPY and not self.threshold_nats >= 0:
            raise InvalidInputError("entropy threshold must be non-negative")

    @classmethod
    def always(cls) -> "StepCriterion":
        return cls(CriterionKind.ALWAYS)

    @classmethod
    def periodic(cls, period: int) -> "StepCriterion":
        return cls(CriterionKind.PERIODIC, period=int(period))

    @classmethod
    def entropy(cls, threshold_nats: float) -> "StepCriterion":
        return cls(CriterionKind.ENTROPY, threshold_nats=float(threshold_nats))

    @classmethod
    def parse(cls, value) -> "StepCriterion":
        """Accepts a StepCriterion, a dict, or a string like ``periodic:2`` / ``entropy:3.2``."""
        if isinstance(value, cls):
            return value
        if isinstance(value, dict):
            kind = CriterionKind(value.get("kind", "always"))
            if kind is CriterionKind.PERIODIC:
                return cls.periodic(value["period"])
            if kind is CriterionKind.ENTROPY:
                return cls.entropy(value["threshold_nats"])
            return cls.always()
        text = str(value).strip().lower()
        name, _, arg = text.partition(":")
        try:
            if name == "always" and not arg:
                return cls.always()
            if name == "periodic":
                return cls.periodic(int(arg))
            if name == "entropy":
                return cls.entropy(float(arg))
        except ValueError:
            pass
        raise InvalidInputError(f"cannot parse step criterion {value!r}")

    def to_dict(self) -> dict:
        if self.kind is CriterionKind.PERIODIC:
            return {"kind": "periodic", "period": self.period}
        if self.kind is CriterionKind.ENTROPY:
            return {"kind": "entropy", "threshold_nats": self.threshold_nats}
        return {"kind": "always"}

    def __str__(self) -> str:
        if self.kind is CriterionKind.PERIODIC:
            return f"periodic:{self.period}"
        if self.kind is CriterionKind.ENTROPY:
            return f"entropy:{self.threshold_nats!r}"
        return "always"


@dataclass(frozen=True)
class GuidanceConfig:
    """All knobs of classifier-guided sampling.

    ``top_j`` and ``top_k`` larger than the vocabulary are clamped at use time;
    ``top_k <= top_j`` is required.
    """

    alpha: float = -5.0
    top_j: int = 100
    top_k: int = 20
    mode: GuidanceMode = GuidanceMode.LOG_PROB
    criterion: StepCriterion = field(default_factory=StepCriterion.always)
    temperature: float = 1.0
    max_new_tokens: int = 20
    include_prompt_in_classifier_input: bool = True
    prob_clamp_epsilon: float = 1e-7

    def __post_init__(self):
        object.__setattr__(self, "mode", GuidanceMode.parse(self.mode))
        object.__setattr__(self, "criterion", StepCriterion.parse(self.criterion))
        if not math.isfinite(self.alpha):
            raise InvalidInputError("alpha must be finite")
        if self.top_j < 1 or self.top_k < 1:
            raise InvalidInputError("top_j and top_k must be positive")
        if self.top_k > self.top_j:
            raise InvalidInputError(f"top_k ({self.top_k}) must not exceed top_j ({self.top_j})")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise InvalidInputError("temperature must be a positive finite number")
        if self.max_new_tokens < 0:
            raise InvalidInputError("max_new_tokens must be non-negative")
        if not 0 < self.prob_clamp_epsilon < 0.5:
            raise InvalidInputError("prob_clamp_epsilon must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "top_j": self.top_j,
            "top_k": self.top_k,
            "mode": self.mode.value,
            "criterion": self.criterion.to_dict(),
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "include_prompt_in_classifier_input": self.include_prompt_in_classifier_input,
            "prob_clamp_epsilon": self.prob_clamp_epsilon,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GuidanceConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class RandomStream:
    """SplitMix64 generator. Single owner; use :meth:`spawn` for a child stream."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix64(self.state)

    def next_unit(self) -> float:
        # top 53 bits so the result is exactly representable and strictly below 1
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def spawn(self, *parts: int) -> "RandomStream":
        return RandomStream(splitmix64_mix(self.state, *parts))


def splitmix64_mix(base_seed: int, *parts: int) -> int:
    """Derive a 64-bit seed from a base seed and integer coordinates."""
    h = _mix64((int(base_seed) + GOLDEN_GAMMA) & MASK64)
    for p in parts:
        salt = _mix64((int(p) + GOLDEN_GAMMA) & MASK64)
        h = _mix64(((h ^ salt) + GOLDEN_GAMMA) & MASK64)
    return h


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("logits must be a non-empty vector")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("logits must be finite")
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    x = x / temperature if temperature != 1.0 else x
    shifted = x - x.max()
    return shifted - math.log(np.exp(shifted).sum())


def entropy_nats(logprobs) -> float:
    lp = np.asarray(logprobs, dtype=np.float64)
    if lp.ndim != 1 or lp.size == 0:
        raise InvalidInputError("log-probabilities must be a non-empty vector")
    p = np.exp(lp)
    if abs(p.sum() - 1.0) > 1e-9:
        raise InvalidInputError(f"distribution sums to {p.sum()!r}, not 1")
    terms = np.where(p > 0, p * lp, 0.0)
    h = -float(terms.sum())
    return min(max(h, 0.0), math.log(lp.size))


def top_m(scores: Sequence[float], m: int) -> list[int]:
    """Indices of the ``m`` largest scores, descending, ties by ascending index."""
    if m < 1:
        raise InvalidInputError("m must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    return order[: min(m, s.size)].tolist()
