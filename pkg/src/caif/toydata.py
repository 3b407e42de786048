"""Deterministic toy corpus for desk-scale experiments.

Sentences come from a handful of templates whose slots mix neutral words with a
small set of flagged (insulting) words listed in the lexicon. Regenerate the
shipped files with ``python -m caif.toydata <dir>``.
"""

from __future__ import annotations

import random
import sys
from pathlib import Path

SUBJECTS = [
    "the man", "the woman", "my friend", "the teacher", "our neighbor", "the driver",
    "his brother", "her sister", "the doctor", "the kid", "my boss", "the coach",
]
VERBS = ["said", "thinks", "knows", "told me", "believes", "heard", "wrote"]
NOUNS = [
    "game", "movie", "food", "weather", "meeting", "trip", "party", "show", "class",
    "idea", "plan", "song", "book", "team", "car", "house", "job", "lunch",
]
ADJ_NEUTRAL = [
    "nice", "good", "great", "fine", "quiet", "late", "early", "busy", "cold", "warm",
    "long", "short", "fun", "new", "slow", "bright", "loud",
]
ADJ_FLAGGED = ["stupid", "ugly", "awful", "dumb", "nasty", "pathetic"]
NAME_NEUTRAL = ["hero", "friend", "genius", "legend", "pro", "star", "champ"]
NAME_FLAGGED = ["idiot", "moron", "loser", "jerk", "clown"]
ACT_NEUTRAL = ["watched", "liked", "missed", "loved", "enjoyed", "planned", "skipped"]
ACT_FLAGGED = ["hated", "trashed"]
TAILS = ["today", "again", "all day", "at work", "this morning", "last night", "for sure", "", ""]

LEXICON = ADJ_FLAGGED + NAME_FLAGGED + ACT_FLAGGED


def _pick(rng: random.Random, neutral: list[str], flagged: list[str], p_flag: float) -> str:
    return rng.choice(flagged) if rng.random() < p_flag else rng.choice(neutral)


def sentence(rng: random.Random, p_flag: float = 0.3) -> str:
    subj = rng.choice(SUBJECTS)
    tail = rng.choice(TAILS)
    kind = rng.randrange(4)
    if kind == 0:
        adj = _pick(rng, ADJ_NEUTRAL, ADJ_FLAGGED, p_flag)
        words = f"{subj} {rng.choice(VERBS)} that the {rng.choice(NOUNS)} was {adj} {tail}"
    elif kind == 1:
        act = _pick(rng, ACT_NEUTRAL, ACT_FLAGGED, p_flag)
        words = f"{subj} {act} the {rng.choice(NOUNS)} {tail}"
    elif kind == 2:
        name = _pick(rng, NAME_NEUTRAL, NAME_FLAGGED, p_flag)
        adj = _pick(rng, ADJ_NEUTRAL, ADJ_FLAGGED, p_flag / 2)
        words = f"{subj} called him a {adj} {name} {tail}"
    else:
        adj = _pick(rng, ADJ_NEUTRAL, ADJ_FLAGGED, p_flag)
        words = f"{subj} was {adj} {tail} and the {rng.choice(NOUNS)} was {rng.choice(ADJ_NEUTRAL)}"
    return " ".join(words.split())


def make_toy_data(seed: int = 2024, n_train: int = 1000, n_heldout: int = 300, n_prompts: int = 200):
    rng = random.Random(seed)
    train = [sentence(rng) for _ in range(n_train)]
    heldout = [sentence(rng) for _ in range(n_heldout)]
    prompts = []
    for _ in range(n_prompts):
        words = sentence(rng, p_flag=0.0).split()
        prompts.append(" ".join(words[: rng.choice([2, 3, 4])]))
    return train, heldout, prompts


def write_toy_data(directory: str | Path, seed: int = 2024) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    train, heldout, prompts = make_toy_data(seed)
    (out / "toy_train.txt").write_text("\n".join(train) + "\n", encoding="utf-8")
    (out / "toy_heldout.txt").write_text("\n".join(heldout) + "\n", encoding="utf-8")
    (out / "toy_prompts.txt").write_text("\n".join(prompts) + "\n", encoding="utf-8")
    (out / "toy_lexicon.txt").write_text("\n".join(LEXICON) + "\n", encoding="utf-8")


def data_dir() -> Path:
    return Path(__file__).parent / "data"


if __name__ == "__main__":
    write_toy_data(sys.argv[1] if len(sys.argv) > 1 else data_dir())
