import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from divsum.corpus import RawTriple, Vocabulary, build_vocab, tokenize
from divsum.metrics import (STOPWORDS, RougeScore, count_repetitions, evaluate, lcs_length, ngrams,
                            read_instances, rouge_l, rouge_n, score_predictions)

tokens = st.lists(st.sampled_from("abcd"), max_size=10)


def split(s):
    return s.split()


class TestRougeN:
    def test_identical(self):
        assert rouge_n(split("a b c"), split("a b c"), 2) == RougeScore(1.0, 1.0, 1.0)

    def test_hand_count(self):
        s = rouge_n(split("the cat"), split("the cat sat"), 1)
        assert (s.precision, s.recall) == (1.0, pytest.approx(2 / 3))
        assert s.f1 == pytest.approx(0.8)

    def test_disjoint(self):
        assert rouge_n(split("a b"), split("c d")).f1 == 0.0

    def test_empty_sides(self):
        assert rouge_n([], split("a")) == RougeScore(0.0, 0.0, 0.0)
        assert rouge_n(split("a"), []) == RougeScore(0.0, 0.0, 0.0)

    def test_clipping_example(self):
        s = rouge_n(split("the the the"), split("the cat"))
        assert s.precision == pytest.approx(1 / 3) and s.recall == 0.5

    def test_bigram_example(self):
        s = rouge_n(split("a b c d"), split("a b d c"), 2)
        assert s.precision == pytest.approx(1 / 3) and s.recall == pytest.approx(1 / 3)

    def test_bad_n(self):
        with pytest.raises(ValueError):
            rouge_n(["a"], ["a"], 0)

    @given(tokens, tokens, st.integers(1, 3))
    def test_overlap_clipped(self, a, b, n):
        s = rouge_n(a, b, n)
        ca, cb = sum(ngrams(a, n).values()), sum(ngrams(b, n).values())
        if ca and cb:
            overlap = round(s.precision * ca)
            assert overlap <= min(ca, cb)
            assert 0.0 <= s.f1 <= 1.0


class TestRougeL:
    def test_identical(self):
        assert rouge_l(split("x y z"), split("x y z")).f1 == 1.0

    def test_hand_example(self):
        s = rouge_l(split("a b c"), split("a c"))
        assert lcs_length(split("a b c"), split("a c")) == 2
        assert (s.precision, s.recall, s.f1) == (pytest.approx(2 / 3), 1.0, pytest.approx(0.8))

    def test_empty_candidate(self):
        assert rouge_l([], split("a")).f1 == 0.0

    @given(tokens, tokens)
    def test_lcs_symmetry(self, a, b):
        assert rouge_l(a, b).recall == rouge_l(b, a).precision

    def test_lowercase_invariance(self):
        a, b = "The Cat SAT", "the cat sat down"
        assert rouge_l(tokenize(a), tokenize(b)) == rouge_l(tokenize(a.lower()), tokenize(b.lower()))

    def test_lcs_exhaustive_up_to_five(self):
        # every pair of sequences of length <= 5 over three symbols, against common-subsequence enumeration
        seqs = ["".join(p) for n in range(6) for p in itertools.product("abc", repeat=n)]
        subs = {s: {c for k in range(len(s) + 1) for c in itertools.combinations(s, k)} for s in seqs}
        for a in seqs:
            for b in seqs:
                assert lcs_length(a, b) == max(len(c) for c in subs[a] & subs[b])


class TestRepetitions:
    def test_plain(self):
        assert count_repetitions([["a", "b", "c"]]) == 0

    def test_published_outputs(self):
        outs = [tokenize("... is a natural death life life use"),
                tokenize("gay marriage is a appropriate right right")]
        assert count_repetitions(outs) == 2

    def test_stopword_policy(self):
        s = [split("the cat and the dog")]
        assert count_repetitions(s) == 1
        assert count_repetitions(s, STOPWORDS) == 0

    def test_counts_summaries_not_tokens(self):
        assert count_repetitions([split("a a a b b")]) == 1


class EchoModel:
    """Stand-in for a trained model: decoding returns the reference summary."""


class TestEvaluate:
    raws = [RawTriple("is it legal ?", "the law allows it in most states", "it is legal"),
            RawTriple("does it cost much ?", "costs are low low", "costs are low low")]
    vocab = build_vocab(raws, min_count=1)

    def _echo(self, monkeypatch):
        lookup = {tuple(self.vocab.encode(tokenize(r.document))): self.vocab.encode(tokenize(r.summary))
                  for r in self.raws}
        from divsum import model as model_mod
        from divsum.model import DecodeTrace

        monkeypatch.setattr(model_mod, "greedy_decode",
                            lambda m, q, d, max_len=None: DecodeTrace(tokens=lookup[tuple(d)] + [3]))
        m = EchoModel()
        m.config = type("C", (), {"vocab_size": len(self.vocab)})()
        return m

    def test_echo_model_scores_one(self, monkeypatch):
        report = evaluate(self._echo(monkeypatch), self.vocab, self.raws)
        assert (report.rouge1, report.rouge2, report.rougeL) == (1.0, 1.0, 1.0)
        assert report.repetition_count == count_repetitions([tokenize(r.summary) for r in self.raws]) == 1

    def test_single_instance(self, monkeypatch):
        report = evaluate(self._echo(monkeypatch), self.vocab, self.raws[:1])
        assert report.n_instances == 1 and report.rougeL == report.instances[0].rougeL

    def test_vocab_mismatch(self, monkeypatch):
        m = self._echo(monkeypatch)
        with pytest.raises(ValueError, match="vocabulary"):
            evaluate(m, Vocabulary(list(self.vocab.tokens) + ["extra"]), self.raws)

    def test_dump_recomputes_means(self, tmp_path):
        rng = np.random.default_rng(0)
        preds = [list(rng.choice(list("abcde"), rng.integers(1, 7))) for _ in range(30)]
        refs = [list(rng.choice(list("abcde"), rng.integers(1, 7))) for _ in range(30)]
        report = score_predictions(preds, refs)
        report.write_instances(tmp_path / "inst.csv")
        rows = read_instances(tmp_path / "inst.csv")
        assert (tmp_path / "inst.csv").read_text().splitlines()[0] == "id,rouge1,rouge2,rougeL,repeated_flag,prediction"
        for key in ("rouge1", "rouge2", "rougeL"):
            assert sum(getattr(r, key) for r in rows) / len(rows) == pytest.approx(getattr(report, key), abs=1e-15)
        assert sum(r.repeated for r in rows) == report.repetition_count <= report.n_instances

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            score_predictions([["a"]], [])
