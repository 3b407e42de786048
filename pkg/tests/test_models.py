import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caif.core import InvalidInputError, log_softmax
from caif.models import (
    CountingScorer,
    LexiconScorer,
    SuppressTokens,
    TableLM,
    TableScorer,
    build_vocabulary,
    lexicon_score,
    load_lexicon,
    load_table_lm,
    load_table_scorer,
    parse_key,
    train_trigram,
)

from helpers import TARGET, vocab


def probs_after(lm, prefix):
    return np.exp(log_softmax(lm.next_logits([prefix])[0]))


class TestTrigram:
    def test_add_k_value(self):
        lm = train_trigram(["a b a"], smoothing_k=1.0)
        v = lm.vocabulary
        assert v.size == 4
        a, b = v.id_of("a"), v.id_of("b")
        # (a, b) seen once, followed by a: (1 + 1) / (1 + 4)
        assert probs_after(lm, (a, b))[a] == pytest.approx(0.4, abs=1e-15)

    def test_unseen_context_uniform(self):
        lm = train_trigram(["a b a"], smoothing_k=1.0)
        a = lm.vocabulary.id_of("a")
        np.testing.assert_allclose(probs_after(lm, (a, a)), 0.25, atol=1e-15)

    def test_mle_ratio(self):
        lm = train_trigram(["a b a", "a b b"], smoothing_k=0.0)
        v = lm.vocabulary
        a, b = v.id_of("a"), v.id_of("b")
        p = probs_after(lm, (a, b))
        assert p[a] == pytest.approx(0.5, abs=1e-15) and p[b] == pytest.approx(0.5, abs=1e-15)
        assert p[v.eos_id] == 0.0

    def test_counts_include_bos_padding_and_eos(self):
        lm = train_trigram(["x y"], smoothing_k=0.0)
        v = lm.vocabulary
        x, y, bos, eos = v.id_of("x"), v.id_of("y"), v.bos_id, v.eos_id
        assert lm.counts == {(bos, bos): {x: 1}, (bos, x): {y: 1}, (x, y): {eos: 1}}
        # step 0 (empty prefix) reads the (BOS, BOS) context
        assert probs_after(lm, ())[x] == 1.0

    def test_empty_corpus(self):
        with pytest.raises(InvalidInputError):
            train_trigram([], 1.0)

    def test_shared_vocabulary(self):
        v = build_vocabulary([["a", "b"]], [["c", "a"]])
        assert v.tokens == ("<s>", "</s>", "a", "b", "c")
        lm = train_trigram(["c a"], 0.5, vocabulary=v)
        assert lm.vocabulary is v
        with pytest.raises(InvalidInputError):
            train_trigram(["d"], 0.5, vocabulary=v)

    @given(
        st.lists(st.lists(st.sampled_from("abcde"), min_size=1, max_size=6), min_size=1, max_size=8),
        st.floats(min_value=0.0, max_value=3.0),
        st.lists(st.integers(0, 6), max_size=4),
    )
    def test_normalized_and_formula(self, corpus, k, prefix):
        lm = train_trigram(corpus, k)
        n = lm.vocabulary.size
        prefix = tuple(t % n for t in prefix)
        p = probs_after(lm, prefix)
        assert abs(math.fsum(p) - 1.0) <= 1e-12
        ctx = lm.context_of(prefix)
        row = lm.counts.get(ctx)
        if row is not None:
            total = sum(row.values())
            for t in range(n):
                expected = (row.get(t, 0) + k) / (total + k * n)
                assert p[t] == pytest.approx(expected, abs=1e-12)

    def test_deterministic_and_batched(self):
        lm = train_trigram(["a b c", "b c a"], 0.3)
        batch = [(), (2,), (2, 3), (3, 4, 2)]
        a, b = lm.next_logits(batch), lm.next_logits(batch)
        assert np.array_equal(a, b)
        assert np.array_equal(a[2], lm.next_logits([batch[2]])[0])
        assert lm.next_logits([]).shape == (0, lm.vocabulary.size)


class TestTables:
    def test_lookup_and_missing_key(self):
        v = vocab(3)
        lm = TableLM(v, {(0,): [0.2, 0.3, 0.5]})
        np.testing.assert_allclose(probs_after(lm, (0,)), [0.2, 0.3, 0.5], atol=1e-15)
        with pytest.raises(KeyError):
            lm.next_logits([(1,)])

    def test_row_validation(self):
        v = vocab(3)
        with pytest.raises(InvalidInputError):
            TableLM(v, {(): [0.5, 0.5]})
        with pytest.raises(InvalidInputError):
            TableLM(v, {(): [0.5, 0.5, 1e-9]})
        with pytest.raises(InvalidInputError):
            TableScorer({(1,): 1.5})

    def test_context_keying(self):
        v = vocab(3)
        lm = TableLM(v, {(): [0.1, 0.2, 0.7]}, context=0)
        assert np.array_equal(lm.next_logits([(2, 2, 2)]), lm.next_logits([()]))
        scorer = TableScorer({(1,): 0.9, (2,): 0.1}, context=1)
        np.testing.assert_array_equal(scorer.score_batch([(0, 2, 1), (2,)], TARGET), [0.9, 0.1])

    def test_key_parsing(self):
        assert parse_key("") == ()
        assert parse_key("3 0 17") == (3, 0, 17)
        for bad in [" 1", "1 ", "1  2", "a", "1,2", "-1"]:
            with pytest.raises(InvalidInputError):
                parse_key(bad)

    def test_fixture_files_round_trip(self, tmp_path):
        v = vocab(3)
        lm = TableLM(v, {(): [0.1, 0.2, 0.7], (2,): [0.3, 0.3, 0.4]})
        scorer = TableScorer({(2,): 0.25, (2, 1): 0.125})
        (tmp_path / "lm.json").write_text(json.dumps(lm.to_json()))
        (tmp_path / "sc.json").write_text(json.dumps(scorer.to_json()))
        lm2 = load_table_lm(tmp_path / "lm.json")
        sc2 = load_table_scorer(tmp_path / "sc.json")
        assert lm2.vocabulary == v
        assert np.array_equal(lm2.next_logits([(), (2,)]), lm.next_logits([(), (2,)]))
        assert sc2.scores == scorer.scores
        # bare mapping form
        (tmp_path / "bare.json").write_text(json.dumps({"2": 0.25, "": 0.5}))
        assert load_table_scorer(tmp_path / "bare.json").scores == {(2,): 0.25, (): 0.5}
        (tmp_path / "bare_lm.json").write_text(json.dumps({"": [0.5, 0.25, 0.25]}))
        assert load_table_lm(tmp_path / "bare_lm.json", v).rows[()].tolist() == [0.5, 0.25, 0.25]

    def test_exact_float_parsing(self, tmp_path):
        v = vocab(2)
        row = [0.1, 0.9]
        (tmp_path / "lm.json").write_text(json.dumps({"vocabulary": v.to_dict(), "rows": {"": row}}))
        assert load_table_lm(tmp_path / "lm.json").rows[()].tolist() == row


class TestLexicon:
    @pytest.mark.parametrize(
        "seq, expected",
        # sigmoid(-2), sigmoid(0), sigmoid(2) from 30-digit mpmath
        [((2, 3), 0.119202922022117556), ((5, 2), 0.5), ((5, 5, 3), 0.880797077977882444)],
    )
    def test_examples(self, seq, expected):
        scorer = LexiconScorer({5})
        assert lexicon_score(seq, scorer) == pytest.approx(expected, abs=1e-15)

    @given(st.lists(st.integers(0, 9), max_size=30), st.integers(0, 9))
    def test_monotone(self, seq, extra):
        scorer = LexiconScorer({1, 4, 7})
        before = scorer.score(seq)
        after = scorer.score(seq + [extra])
        if extra in scorer.flagged_ids:
            assert after >= before
        else:
            assert after == before

    @given(st.lists(st.lists(st.integers(0, 9), max_size=8), max_size=12))
    def test_batch_consistency(self, seqs):
        scorer = LexiconScorer({0, 3})
        batch = scorer.score_batch(seqs, TARGET)
        assert batch.tolist() == [scorer.score(s) for s in seqs]
        assert np.array_equal(batch, scorer.score_batch(seqs, TARGET))

    def test_load_lexicon(self, tmp_path):
        v = build_vocabulary([["good", "bad", "worse"]])
        path = tmp_path / "lex.txt"
        path.write_text("bad\nworse\n\nmissing\n", encoding="utf-8")
        scorer = load_lexicon(path, v)
        assert scorer.flagged_ids == {v.id_of("bad"), v.id_of("worse")}


def test_counting_scorer():
    inner = LexiconScorer({1})
    counter = CountingScorer(inner)
    counter.score_batch([(1,), (2,), (3,)], TARGET)
    counter.score_batch([(1,)], TARGET)
    assert (counter.calls, counter.sequences) == (2, 4)
    counter.reset()
    assert (counter.calls, counter.sequences) == (0, 0)


def test_suppress_tokens():
    v = vocab(3)
    lm = SuppressTokens(TableLM(v, {(): [0.2, 0.5, 0.3]}), [1])
    p = probs_after(lm, ())
    assert p[1] == 0.0
    assert p[0] == pytest.approx(0.4, abs=1e-15) and p[2] == pytest.approx(0.6, abs=1e-15)
