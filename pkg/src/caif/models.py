"""Model contracts consumed by the sampler, plus small deterministic implementations."""

from __future__ import annotations

import json
import logging
import math
import re
import threading
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .core import ZERO_PROB_LOGIT, AttributeTarget, InvalidInputError, Vocabulary

logger = logging.getLogger(__name__)

BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"


@runtime_checkable
class LogitSource(Protocol):
    vocabulary: Vocabulary

    def next_logits(self, prefix_batch: Sequence[Sequence[int]]) -> np.ndarray:
        """One row of |V| finite logits per prefix."""
        ...


@runtime_checkable
class AttributeScorer(Protocol):
    def score_batch(
        self, sequences: Sequence[Sequence[int]], target: AttributeTarget
    ) -> np.ndarray:
        """Attribute probability in [0, 1] for every sequence."""
        ...


def _logits_from_probs(row: np.ndarray) -> np.ndarray:
    out = np.full(row.shape, ZERO_PROB_LOGIT)
    pos = row > 0
    out[pos] = np.log(row[pos])
    return out


def _empty_logits(vocab_size: int) -> np.ndarray:
    return np.zeros((0, vocab_size))


# --------------------------------------------------------------------------- trigram


def build_vocabulary(*corpora: Iterable[Sequence[str]]) -> Vocabulary:
    """BOS and EOS first, then corpus tokens in order of first appearance."""
    tokens = [BOS_TOKEN, EOS_TOKEN]
    seen = set(tokens)
    for corpus in corpora:
        for line in corpus:
            for tok in line:
                if tok not in seen:
                    seen.add(tok)
                    tokens.append(tok)
    return Vocabulary(tuple(tokens), eos_id=1, bos_id=0)


class TrigramLM:
    """Add-k smoothed trigram model over whole-word tokens.

    Contexts are the last two ids of ``(BOS, BOS) + prefix``. With ``smoothing_k == 0``
    an unseen context falls back to the uniform distribution.
    """

    def __init__(
        self,
        vocabulary: Vocabulary,
        counts: Mapping[tuple[int, int], Mapping[int, int]],
        smoothing_k: float,
    ):
        if smoothing_k < 0:
            raise InvalidInputError("smoothing_k must be non-negative")
        self.vocabulary = vocabulary
        self.smoothing_k = float(smoothing_k)
        self.counts = {ctx: dict(row) for ctx, row in counts.items()}
        self.totals = {ctx: sum(row.values()) for ctx, row in self.counts.items()}
        self._rows: dict[tuple[int, int], np.ndarray] = {}
        self._lock = threading.Lock()
        v = vocabulary.size
        self._unseen = np.full(v, -math.log(v))

    def context_of(self, prefix: Sequence[int]) -> tuple[int, int]:
        bos = self.vocabulary.bos_id
        padded = (bos, bos, *prefix)
        return (int(padded[-2]), int(padded[-1]))

    def prob_row(self, context: tuple[int, int]) -> np.ndarray:
        v = self.vocabulary.size
        row = self.counts.get(context)
        if row is None:
            return np.full(v, 1.0 / v)
        k = self.smoothing_k
        dense = np.full(v, k)
        for tok, c in row.items():
            dense[tok] += c
        return dense / (self.totals[context] + k * v)

    def _logit_row(self, context: tuple[int, int]) -> np.ndarray:
        if context not in self.counts:
            return self._unseen
        row = self._rows.get(context)
        if row is None:
            row = _logits_from_probs(self.prob_row(context))
            with self._lock:
                self._rows[context] = row
        return row

    def next_logits(self, prefix_batch):
        if len(prefix_batch) == 0:
            return _empty_logits(self.vocabulary.size)
        return np.stack([self._logit_row(self.context_of(p)) for p in prefix_batch])


def _split_corpus(corpus) -> list[list[str]]:
    return [line.split() if isinstance(line, str) else list(line) for line in corpus]


def train_trigram(
    corpus: Sequence[Sequence[str] | str],
    smoothing_k: float = 1.0,
    vocabulary: Vocabulary | None = None,
) -> TrigramLM:
    """Count trigrams over ``BOS BOS w1 .. wn EOS`` for every training sequence.

    Lines given as strings are split on whitespace. When ``vocabulary`` is omitted
    it is built from the corpus; otherwise every corpus token must be in it.
    """
    lines = _split_corpus(corpus)
    if not lines:
        raise InvalidInputError("corpus is empty")
    if smoothing_k < 0:
        raise InvalidInputError("smoothing_k must be non-negative")
    vocab = vocabulary or build_vocabulary(lines)
    bos, eos = vocab.bos_id, vocab.eos_id
    counts: dict[tuple[int, int], Counter] = defaultdict(Counter)
    for line in lines:
        ids = [bos, bos, *(vocab.id_of(t) for t in line), eos]
        for a, b, c in zip(ids, ids[1:], ids[2:]):
            counts[(a, b)][c] += 1
    return TrigramLM(vocab, counts, smoothing_k)


def read_corpus(path: str | Path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    return [line.split() for line in text.splitlines() if line.strip()]


# --------------------------------------------------------------------------- tables

_KEY_RE = re.compile(r"^(\d+( \d+)*)?$")


def parse_key(key: str) -> tuple[int, ...]:
    """``"3 0 7"`` -> ``(3, 0, 7)``; ``""`` is the empty sequence."""
    if not _KEY_RE.match(key):
        raise InvalidInputError(f"malformed sequence key {key!r}")
    return tuple(int(t) for t in key.split(" ")) if key else ()


def format_key(seq: Sequence[int]) -> str:
    return " ".join(str(int(t)) for t in seq)


def _table_key(seq: Sequence[int], context: int | None) -> tuple[int, ...]:
    seq = tuple(int(t) for t in seq)
    if context is None:
        return seq
    return seq[len(seq) - context:] if context < len(seq) else seq


class TableLM:
    """Explicit prefix -> next-token distribution table.

    With ``context=None`` the whole prefix is the key; with an integer only the
    last ``context`` ids are (``0`` gives a single context-free row).
    """

    def __init__(
        self,
        vocabulary: Vocabulary,
        rows: Mapping[Sequence[int], Sequence[float]],
        context: int | None = None,
    ):
        self.vocabulary = vocabulary
        self.context = context
        self.rows: dict[tuple[int, ...], np.ndarray] = {}
        self._logits: dict[tuple[int, ...], np.ndarray] = {}
        v = vocabulary.size
        for key, row in rows.items():
            arr = np.asarray(row, dtype=np.float64)
            if arr.shape != (v,):
                raise InvalidInputError(f"row for {key!r} has length {arr.size}, expected {v}")
            if np.any(arr < 0) or abs(math.fsum(arr) - 1.0) > 1e-12:
                raise InvalidInputError(f"row for {key!r} is not a probability distribution")
            k = tuple(int(t) for t in key)
            self.rows[k] = arr
            self._logits[k] = _logits_from_probs(arr)

    def _lookup(self, prefix):
        key = _table_key(prefix, self.context)
        try:
            return self._logits[key]
        except KeyError:
            raise KeyError(f"no table row for prefix {format_key(key)!r}") from None

    def next_logits(self, prefix_batch):
        if len(prefix_batch) == 0:
            return _empty_logits(self.vocabulary.size)
        return np.stack([self._lookup(p) for p in prefix_batch])

    def to_json(self) -> dict:
        return {
            "vocabulary": self.vocabulary.to_dict(),
            "context": self.context,
            "rows": {format_key(k): v.tolist() for k, v in self.rows.items()},
        }


class TableScorer:
    """Explicit sequence -> attribute probability table (same keying rules as TableLM)."""

    def __init__(self, scores: Mapping[Sequence[int], float], context: int | None = None):
        self.context = context
        self.scores: dict[tuple[int, ...], float] = {}
        for key, p in scores.items():
            p = float(p)
            if not 0.0 <= p <= 1.0:
                raise InvalidInputError(f"score for {key!r} outside [0, 1]")
            self.scores[tuple(int(t) for t in key)] = p

    def score_batch(self, sequences, target):
        out = np.empty(len(sequences))
        for i, seq in enumerate(sequences):
            key = _table_key(seq, self.context)
            try:
                out[i] = self.scores[key]
            except KeyError:
                raise KeyError(f"no table score for sequence {format_key(key)!r}") from None
        return out

    def to_json(self) -> dict:
        return {
            "context": self.context,
            "scores": {format_key(k): v for k, v in self.scores.items()},
        }


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise InvalidInputError(f"{path}: expected a JSON object")
    return obj


def table_lm_from_json(obj: dict, vocabulary: Vocabulary | None = None) -> TableLM:
    """Accepts ``{"vocabulary", "context", "rows"}`` or a bare key -> row mapping."""
    if "rows" in obj:
        if "vocabulary" in obj:
            vocabulary = Vocabulary.from_dict(obj["vocabulary"])
        rows, context = obj["rows"], obj.get("context")
    else:
        rows, context = obj, None
    if vocabulary is None:
        raise InvalidInputError("table LM fixture needs a vocabulary")
    return TableLM(vocabulary, {parse_key(k): v for k, v in rows.items()}, context)


def table_scorer_from_json(obj: dict) -> TableScorer:
    if "scores" in obj:
        scores, context = obj["scores"], obj.get("context")
    else:
        scores, context = obj, None
    return TableScorer({parse_key(k): v for k, v in scores.items()}, context)


def load_table_lm(path, vocabulary: Vocabulary | None = None) -> TableLM:
    return table_lm_from_json(_read_json(path), vocabulary)


def load_table_scorer(path) -> TableScorer:
    return table_scorer_from_json(_read_json(path))


# --------------------------------------------------------------------------- lexicon


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


class LexiconScorer:
    """score = sigmoid(w0 + w1 * number of flagged tokens in the sequence)."""

    def __init__(self, flagged_ids: Iterable[int], w0: float = -2.0, w1: float = 2.0):
        self.flagged_ids = frozenset(int(i) for i in flagged_ids)
        self.w0 = float(w0)
        self.w1 = float(w1)
        self._flagged = np.array(sorted(self.flagged_ids), dtype=np.int64)

    def count_flagged(self, seq: Sequence[int]) -> int:
        return sum(1 for t in seq if t in self.flagged_ids)

    def score(self, seq: Sequence[int]) -> float:
        return sigmoid(self.w0 + self.w1 * self.count_flagged(seq))

    def score_batch(self, sequences, target=None):
        if len(sequences) == 0:
            return np.zeros(0)
        lengths = {len(s) for s in sequences}
        if len(lengths) == 1 and lengths != {0}:
            # the guided step scores j sequences of equal length; vectorize that case
            counts = np.isin(np.asarray(sequences, dtype=np.int64), self._flagged).sum(axis=1)
        else:
            counts = [self.count_flagged(s) for s in sequences]
        return np.array([sigmoid(self.w0 + self.w1 * int(m)) for m in counts])


def lexicon_score(seq: Sequence[int], scorer: LexiconScorer) -> float:
    return scorer.score(seq)


def load_lexicon(path, vocabulary: Vocabulary, w0: float = -2.0, w1: float = 2.0) -> LexiconScorer:
    """One flagged token per line. Words missing from the vocabulary can never occur
    and are skipped."""
    words = [w.strip() for w in Path(path).read_text(encoding="utf-8").splitlines()]
    ids = []
    for w in words:
        if not w:
            continue
        if w in vocabulary.tokens:
            ids.append(vocabulary.id_of(w))
        else:
            logger.warning("lexicon word %r not in vocabulary, skipped", w)
    return LexiconScorer(ids, w0, w1)


# --------------------------------------------------------------------------- wrappers


class CountingScorer:
    """Pass-through scorer that counts batch calls and sequences scored."""

    def __init__(self, inner: AttributeScorer):
        self.inner = inner
        self.calls = 0
        self.sequences = 0
        self._lock = threading.Lock()

    def score_batch(self, sequences, target):
        with self._lock:
            self.calls += 1
            self.sequences += len(sequences)
        return self.inner.score_batch(sequences, target)

    def reset(self) -> None:
        with self._lock:
            self.calls = 0
            self.sequences = 0


class SuppressTokens:
    """Logit source wrapper that gives the listed token ids zero probability."""

    def __init__(self, inner: LogitSource, banned_ids: Iterable[int]):
        self.inner = inner
        self.vocabulary = inner.vocabulary
        self.banned_ids = sorted(set(int(i) for i in banned_ids))

    def next_logits(self, prefix_batch):
        logits = np.array(self.inner.next_logits(prefix_batch), dtype=np.float64)
        if logits.size:
            logits[:, self.banned_ids] = ZERO_PROB_LOGIT
        return logits
