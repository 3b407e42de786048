"""Fixture builders shared by the test modules."""

from __future__ import annotations

import itertools

import numpy as np

from caif.core import AttributeTarget, Vocabulary
from caif.models import TableLM, TableScorer

TARGET = AttributeTarget("toxic")


def vocab(n: int) -> Vocabulary:
    """Tokens t0..t{n-1}; BOS is 0, EOS is 1."""
    return Vocabulary(tuple(f"t{i}" for i in range(n)), eos_id=1, bos_id=0)


def random_row(rng: np.random.Generator, n: int) -> np.ndarray:
    row = rng.dirichlet(np.full(n, 0.7))
    row = np.maximum(row, 1e-12)
    return row / row.sum()


def random_class_prob(rng: np.random.Generator) -> float:
    # mostly interior values, sometimes saturated ones to exercise the clamp
    r = rng.random()
    if r < 0.05:
        return 0.0
    if r < 0.10:
        return 1.0
    return float(rng.random())


def single_step_fixture(rng: np.random.Generator, n: int, prefix=(0,)):
    """TableLM with one row for ``prefix`` and a scorer covering prefix + t for all t."""
    v = vocab(n)
    lm = TableLM(v, {tuple(prefix): random_row(rng, n)})
    scorer = TableScorer({tuple(prefix) + (t,): random_class_prob(rng) for t in range(n)})
    return lm, scorer


def tree_fixture(rng: np.random.Generator, n: int, prompt=(0,), horizon: int = 2):
    """Rows for every non-terminated prefix up to ``horizon`` and scores for every
    sequence of length 1..horizon after ``prompt``."""
    v = vocab(n)
    rows, scores = {}, {}
    frontier = [()]
    for _ in range(horizon):
        nxt = []
        for cont in frontier:
            rows[tuple(prompt) + cont] = random_row(rng, n)
            for t in range(n):
                seq = cont + (t,)
                scores[tuple(prompt) + seq] = random_class_prob(rng)
                if t != v.eos_id:
                    nxt.append(seq)
        frontier = nxt
    return TableLM(v, rows), TableScorer(scores)


def all_sequences(n: int, length: int):
    return itertools.product(range(n), repeat=length)
