"""Acceptance criteria, one recorded PASS/FAIL line each (printed in the terminal summary).

Tolerances are pinned here and nowhere else.
"""

import itertools
import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from divsum import diversity as div
from divsum.attention import DocAttnParams, QueryAttnParams, document_attention, query_attention
from divsum.checks import gradcheck
from divsum.checkpoint import Checkpoint
from divsum.cli import MANIFEST, run
from divsum.corpus import EOS, SOS, Triple, build_vocab, encode_all, load_triples, toy_corpus_path, tokenize
from divsum.diversity import DiversityMode as M
from divsum.metrics import count_repetitions, rouge_l, rouge_n
from divsum.model import Model, ModelConfig, greedy_decode, sequence_loss
from divsum.tensor import Graph, constant
from divsum.trainer import TrainConfig, train_fold

GRAD_TOL = 1e-4
GRAD_BUDGET_S = 120.0
ORTHO_TOL = 1e-8
REDUCTION_TOL = 1e-10
SIMPLEX_TOL = 1e-6
ROUGE_BUDGET_S = 60.0
OVERFIT_LOSS = 0.1
OVERFIT_EXACT = 18
OVERFIT_BUDGET_S = 600.0
ARCH_TOL = 1e-10

ALL_MODES = ["NONE", "D1", "SD1", "D2", "SD2", "B1", "M1", "M2"]


def test_gradient_suite(acceptance):
    start = time.perf_counter()
    worst = {m: max(c.error for c in gradcheck(m, dims=8, seeds=range(20))) for m in ALL_MODES}
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = top < GRAD_TOL and elapsed < GRAD_BUDGET_S
    detail = ", ".join(f"{m} {e:.1e}" for m, e in worst.items())
    assert acceptance("gradient suite", ok, f"max rel. error {top:.2e} < {GRAD_TOL:g} over 8 modes x 20 seeds "
                                            f"(dims 8, N 12, len 5) in {elapsed:.0f}s < {GRAD_BUDGET_S:.0f}s; {detail}")


def _rollout(mode, p, xs, **kw):
    state = div.initial_state(mode, xs.shape[1])
    outs, states = [], []
    for x in xs:
        out, state = div.apply(Graph(record=False), mode, p, constant(x), state, **kw)
        outs.append(out.data)
        states.append(state)
    return outs, states


def _cos_bound(a, b):
    return abs(a @ b) <= ORTHO_TOL * np.linalg.norm(a) * np.linalg.norm(b)


def test_orthogonality_suite(acceptance):
    d1_bad = d2_bad = 0
    sd1_gap = sd2_gap = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        xs = rng.normal(size=(8, 6))
        outs, _ = _rollout(M.D1, {}, xs)
        d1_bad += sum(not _cos_bound(outs[t], outs[t - 1]) for t in range(1, 8))

        p2 = div.init_params(M.D2, 5, 6, rng)
        _, states = _rollout(M.D2, p2, xs)
        d2_bad += sum(not _cos_bound(states[t].diverse_cell.data, states[t - 1].cell.data) for t in range(1, 8))

        p1 = div.init_params(M.SD1, 5, 6, rng)
        p1["div.W_g"].data[...] = 0.0
        p1["div.b_g"].data[...] = 1.0
        a, _ = _rollout(M.SD1, p1, xs)
        sd1_gap = max(sd1_gap, max(np.max(np.abs(x - y)) for x, y in zip(a, outs)))

        ps = div.init_params(M.SD2, 5, 6, rng)
        for k, v in p2.items():
            ps[k].data[...] = v.data
        ps["div.W_g"].data[...] = 0.0
        ps["div.U_g"].data[...] = 0.0
        ps["div.b_g"].data[...] = 50.0  # sigmoid(50) = 1 - 2e-22
        a, _ = _rollout(M.SD2, ps, xs)
        b, _ = _rollout(M.D2, p2, xs)
        sd2_gap = max(sd2_gap, max(np.max(np.abs(x - y)) for x, y in zip(a, b)))
    ok = d1_bad == 0 and d2_bad == 0 and sd1_gap <= REDUCTION_TOL and sd2_gap <= REDUCTION_TOL
    assert acceptance("orthogonality suite", ok,
                      f"100 rollouts of length 8: D1 violations {d1_bad}, D2 violations {d2_bad} "
                      f"(bound {ORTHO_TOL:g}*|a||b|); SD1 gate 1 vs D1 {sd1_gap:.1e}, SD2 gate 1 vs D2 {sd2_gap:.1e} "
                      f"(<= {REDUCTION_TOL:g})")


def test_attention_suite(acceptance):
    rng = np.random.default_rng(0)
    worst_sum, min_entry, masked_nonzero, calls = 0.0, 0.0, 0, 0
    for i in range(1000):
        l1, l2, l4 = rng.integers(2, 9, 3)
        n = int(rng.integers(1, 40))
        mask = rng.random(n) < 0.7
        mask[rng.integers(n)] = True
        scale = 10 ** rng.uniform(-2, 1.5)
        s = constant(rng.normal(size=l1) * scale)
        H = constant(rng.normal(size=(n, l4)) * scale)
        kind = i % 3
        if kind == 0:
            qp = QueryAttnParams.init(l1, l4, rng)
            alpha = query_attention(Graph(record=False), qp, s, H, mask=mask).weights.data
        elif kind == 1:
            dp = DocAttnParams.init(l1, l4, l2, rng)
            q = constant(rng.normal(size=l2) * scale)
            alpha = document_attention(Graph(record=False), dp, s, H, q, mask=mask).weights.data
        else:
            p = div.init_params(M.M2, l1, l4, rng)
            state = div.initial_state(M.M2, l4, n)
            alpha = None
            for _ in range(3):  # later steps subtract the attention history
                alpha, _, _, state = div.m2_attention(Graph(record=False), p, s, H, state, mask=mask)
            alpha = alpha.data
        calls += 1
        worst_sum = max(worst_sum, abs(alpha.sum() - 1.0))
        min_entry = min(min_entry, alpha.min())
        masked_nonzero += int(np.count_nonzero(alpha[~mask]))
    ok = worst_sum <= SIMPLEX_TOL and min_entry >= 0 and masked_nonzero == 0
    assert acceptance("attention suite", ok,
                      f"{calls} randomized calls (query, document, distraction): max |sum-1| {worst_sum:.1e} "
                      f"<= {SIMPLEX_TOL:g}, min weight {min_entry:.1e} >= 0, nonzero masked weights {masked_nonzero}")


def _subsequence_mask(seq) -> int:
    # subsequences over {a,b,c} coded in base 4 with digits 1..3, so a longer code is always larger
    bits = 0
    for k in range(len(seq) + 1):
        for sub in itertools.combinations(seq, k):
            code = 0
            for ch in sub:
                code = code * 4 + " abc".index(ch)
            bits |= 1 << code
    return bits


def _code_length(code: int) -> int:
    n = 0
    while code:
        code //= 4
        n += 1
    return n


def test_rouge_oracle(acceptance):
    """Exact agreement with exhaustive common-subsequence enumeration on every pair of length <= 8.

    There are 9,841 sequences and 96.8 million ordered pairs.  The check walks
    them in a fixed order until done or until the time budget runs out.
    Set DIVSUM_ROUGE_UNBOUNDED=1 to walk all of them regardless of time.
    """
    fixtures = [
        (rouge_n(["the", "cat"], ["the", "cat", "sat"], 1), (1.0, 2 / 3, 0.8)),
        (rouge_n(["a", "b"], ["a", "b"], 2), (1.0, 1.0, 1.0)),
        (rouge_n(["a", "b"], ["c", "d"], 1), (0.0, 0.0, 0.0)),
        (rouge_n(["the", "the", "the"], ["the", "cat"], 1), (1 / 3, 0.5, 0.4)),
        (rouge_l(["a", "b", "c"], ["a", "c"]), (2 / 3, 1.0, 0.8)),
    ]
    fixtures_ok = all(np.allclose((s.precision, s.recall, s.f1), want, rtol=0, atol=1e-15) for s, want in fixtures)

    seqs = ["".join(p) for n in range(9) for p in itertools.product("abc", repeat=n)]
    masks = {}
    unbounded = os.environ.get("DIVSUM_ROUGE_UNBOUNDED") == "1"
    start = time.perf_counter()
    checked = mismatches = 0
    timed_out = False
    for a in seqs:
        ma = masks.get(a) or masks.setdefault(a, _subsequence_mask(a))
        ta = tuple(a)
        for b in seqs:
            mb = masks.get(b) or masks.setdefault(b, _subsequence_mask(b))
            lcs = _code_length((ma & mb).bit_length() - 1)
            got = rouge_l(ta, tuple(b))
            if a and b:
                p, r = lcs / len(a), lcs / len(b)
                want = (p, r, 2 * p * r / (p + r) if p + r else 0.0)
            else:
                want = (0.0, 0.0, 0.0)
            mismatches += (got.precision, got.recall, got.f1) != want
            checked += 1
        if not unbounded and time.perf_counter() - start > ROUGE_BUDGET_S:
            timed_out = True
            break
    elapsed = time.perf_counter() - start
    total = len(seqs) ** 2
    complete = checked == total
    ok = fixtures_ok and mismatches == 0 and complete and elapsed < ROUGE_BUDGET_S
    detail = (f"rouge_n/rouge_l fixtures {'exact' if fixtures_ok else 'WRONG'}; exhaustive rouge_l: "
              f"{checked:,} of {total:,} pairs checked, {mismatches} mismatches, {elapsed:.0f}s "
              f"(budget {ROUGE_BUDGET_S:.0f}s{', stopped at budget' if timed_out else ''})")
    assert acceptance("ROUGE oracle", ok, detail)


def test_repetition_oracle(acceptance):
    predicted = ["the large to euthanasia is a natural death life life use",
                 "gay marriage is a appropriate right right"]
    gold = ["The alternative to euthanasia is a natural death without life support.",
            "Gay marriage is a fundamental equal right."]
    flagged = count_repetitions([tokenize(s) for s in predicted])
    gold_flagged = count_repetitions([tokenize(s) for s in gold])
    ok = flagged == 2 and gold_flagged == 0
    assert acceptance("repetition oracle", ok,
                      f"published outputs flagged {flagged}/2, ground-truth summaries flagged {gold_flagged}/2")


OVERFIT = TrainConfig(mode="SD2", embed_dim=32, hidden=32, batch_size=1, lr=4e-4, epochs=500, patience=None, seed=0)


@pytest.fixture(scope="module")
def overfit():
    raws = load_triples(toy_corpus_path())
    vocab = build_vocab(raws, min_count=1)
    triples = encode_all(raws, vocab)
    start = time.perf_counter()
    result = train_fold(OVERFIT, vocab, triples)
    return raws, vocab, triples, result, time.perf_counter() - start


def test_overfit(acceptance, overfit):
    raws, vocab, triples, result, elapsed = overfit
    exact = sum(
        vocab.decode(greedy_decode(result.model, t.query_ids, t.doc_ids).tokens) == tokenize(r.summary)
        for r, t in zip(raws, triples)
    )
    loss = result.curves[-1][1]
    ok = loss < OVERFIT_LOSS and exact >= OVERFIT_EXACT and elapsed < OVERFIT_BUDGET_S
    assert acceptance("overfit", ok,
                      f"toy corpus (20 triples), SD2, d=32, hidden=32, 500 epochs: final loss {loss:.4f}/token "
                      f"< {OVERFIT_LOSS}, exact reproductions {exact}/20 >= {OVERFIT_EXACT}, "
                      f"{elapsed:.0f}s < {OVERFIT_BUDGET_S:.0f}s")


def test_determinism(acceptance, tmp_path):
    work = tmp_path / "work"
    assert run(["prepare", "--data", str(toy_corpus_path()), "--out", str(work), "--folds", "4", "--min-count",
                "1"]) == 0
    first = tmp_path / "first"
    assert run(["train", "--work", str(work), "--fold", "1", "--mode", "SD2", "--hidden", "8", "--embed-dim", "8",
                "--epochs", "3", "--batch", "2", "--out", str(first)]) == 0
    second = tmp_path / "second"
    assert run(["train", "--from-manifest", str(first / MANIFEST), "--out", str(second)]) == 0
    same_ckpt = (first / "model.ckpt").read_bytes() == (second / "model.ckpt").read_bytes()

    ckpt = Checkpoint.load(first / "model.ckpt")
    before = ckpt.to_model()
    ckpt.save(tmp_path / "copy.ckpt")
    after = Checkpoint.load(tmp_path / "copy.ckpt").to_model()
    rng = np.random.default_rng(0)
    n = before.config.vocab_size
    identical = 0
    for _ in range(20):
        q = [int(i) for i in rng.integers(4, n, rng.integers(1, 8))]
        d = [int(i) for i in rng.integers(4, n, rng.integers(1, 30))]
        a, b = greedy_decode(before, q, d), greedy_decode(after, q, d)
        identical += a.tokens == b.tokens and all(np.array_equal(x, y) for x, y in zip(a.distributions,
                                                                                       b.distributions))
    ok = same_ckpt and identical == 20
    assert acceptance("determinism", ok, f"train repeated from its manifest: checkpoints "
                                         f"{'bit-identical' if same_ckpt else 'DIFFER'}; save/load decodes "
                                         f"bit-identical on {identical}/20 inputs")


# -- independent straight-line forward for the static-query configuration -----

def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gru(P, prefix, h, x):
    W = {k: P[f"{prefix}.{k}"] for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")}
    z = _sig(W["W_z"] @ x + W["U_z"] @ h + W["b_z"])
    r = _sig(W["W_r"] @ x + W["U_r"] @ h + W["b_r"])
    cand = np.tanh(W["W_h"] @ x + W["U_h"] @ (r * h) + W["b_h"])
    return (1 - z) * h + z * cand


def _encode(P, prefix, X, size):
    h, out = np.zeros(size), []
    for x in X:
        h = _gru(P, prefix, h, x)
        out.append(h)
    return np.array(out)


def _reference_query_enc(P, q_ids, d_ids, summary, l):
    E = P["E"]
    Hq = _encode(P, "gru_q", E[q_ids], l)
    Hd = _encode(P, "gru_d", E[d_ids], l)
    q = Hq.mean(axis=0)
    s = np.tanh(P["dec.s_init"] @ Hd[-1])
    d_prev = np.zeros(l)
    prev = SOS
    nll, dists = [], []
    for gold in summary:
        s = _gru(P, "gru_dec", s, np.concatenate([E[prev], d_prev]))
        e = np.tanh(P["att_d.W_d"] @ s + Hd @ P["att_d.U_d"].T + P["att_d.Z"] @ q) @ P["att_d.v_d"]
        a = np.exp(e - e.max())
        a /= a.sum()
        d = a @ Hd
        logits = P["dec.W_o"] @ (P["dec.W_dec"] @ s + P["dec.V_dec"] @ d)
        y = np.exp(logits - logits.max())
        y /= y.sum()
        dists.append(y)
        nll.append(-math.log(y[gold]))
        prev, d_prev = gold, d
    return sum(nll) / len(nll), dists


def test_architecture_reduction(acceptance):
    l = 6
    config = ModelConfig(vocab_size=15, embed_dim=5, dec_hidden=l, query_hidden=l, doc_hidden=l, mode="NONE",
                         query_mode="static")
    rng = np.random.default_rng(2024)
    model = Model.init(config, rng)
    for p in model.params.values():
        p.data[...] = rng.uniform(-0.8, 0.8, p.shape)
    P = {k: v.data for k, v in model.params.items()}
    triple = Triple((4, 9, 11, 6), (5, 7, 7, 12, 13, 8, 10), (9, 12, 14, 5, EOS))

    ref_loss, ref_dists = _reference_query_enc(P, list(triple.query_ids), list(triple.doc_ids),
                                               list(triple.summary_ids), l)
    loss = float(sequence_loss(Graph(record=False), model, triple).data)

    g = Graph(record=False)
    enc = model.encode_inputs(g, triple.query_ids, triple.doc_ids)
    s, dprime, state = model.start(enc)
    prev, gap = SOS, abs(loss - ref_loss)
    for gold, ref in zip(triple.summary_ids, ref_dists):
        out = model.step(g, enc, s, g.row(model.embeddings.matrix, prev), dprime, state)
        s, dprime, state = out.s, out.d_prime, out.state
        gap = max(gap, float(np.max(np.abs(g.softmax(out.logits).data - ref))))
        prev = gold
    ok = gap < ARCH_TOL
    assert acceptance("architecture reduction", ok,
                      f"mode NONE + static query mean vs independent numpy Query_enc forward: max deviation "
                      f"{gap:.1e} < {ARCH_TOL:g} over loss and {len(ref_dists)} output distributions")


def test_directional_smoke_report(acceptance, tmp_path):
    """Reported, not gated: repetition counts for Query_att, D1 and D2 in the repetition-table layout.

    Uses DIVSUM_SMOKE_DATA (a JSONL triple file) when set, else a seeded synthetic corpus of 1,000 triples.
    """
    from synthetic import write_corpus

    data = os.environ.get("DIVSUM_SMOKE_DATA")
    if not data:
        data = tmp_path / "synthetic.jsonl"
        write_corpus(data, 1000, seed=0)
    source = "DIVSUM_SMOKE_DATA" if os.environ.get("DIVSUM_SMOKE_DATA") else "synthetic 1,000 triples"
    work = tmp_path / "work"
    assert run(["prepare", "--data", str(data), "--out", str(work), "--folds", "10", "--seed", "0"]) == 0
    small = ["--hidden", "16", "--embed-dim", "16", "--epochs", "4", "--batch", "16", "--lr", "4e-3",
             "--patience", "-1", "--max-len", "12"]
    for mode in ("NONE", "D1", "D2"):
        assert run(["train", "--work", str(work), "--fold", "0", "--mode", mode, *small]) == 0
        assert run(["eval", "--work", str(work), "--checkpoint", str(work / "runs" / f"{mode}-attention" / "fold_0")]) == 0
    out = tmp_path / "report"
    assert run(["report", "--runs", str(work / "runs"), "--out", str(out)]) == 0
    rows = (out / "repetitions.csv").read_text().splitlines()
    counts = {r.split(",")[0]: r.split(",")[2] for r in rows[1:]}
    print((out / "tables.txt").read_text())
    acceptance("directional smoke report (not gated)", True,
               f"{source}, fold 0 test split, dims 16: repeated summaries Query_att {counts.get('Query_att')}, "
               f"D1 {counts.get('D1')}, D2 {counts.get('D2')} (published: 498 / 191 / 179 over full folds)")
    assert set(counts) == {"Query_att", "D1", "D2"}
