"""Full-length ROUGE-1/2/L and repeated-word counting."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

# Used only when the stopword policy is switched on.
STOPWORDS = frozenset("""
a an the and or but if of to in on at by for with from as is are was were be been being it its
this that these those there their they them he she his her we our you your i me my not no so do
does did than then too very can will would should could has have had into over under about
""".split())


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: int, cand_total: int, ref_total: int) -> "RougeScore":
        if cand_total == 0 or ref_total == 0:
            return cls(0.0, 0.0, 0.0)
        p = overlap / cand_total
        r = overlap / ref_total
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int = 1) -> RougeScore:
    """Clipped n-gram overlap."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((cand & ref).values())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    return RougeScore.from_counts(lcs_length(candidate, reference), len(candidate), len(reference))


def has_repetition(tokens: Sequence[str], stopwords: Iterable[str] | None = None) -> bool:
    drop = frozenset(stopwords or ())
    counts = Counter(t for t in tokens if t not in drop)
    return any(c >= 2 for c in counts.values())


def count_repetitions(summaries: Iterable[Sequence[str]], stopwords: Iterable[str] | None = None) -> int:
    """Number of summaries in which some (non-stopword) token occurs at least twice."""
    drop = frozenset(stopwords or ())
    return sum(has_repetition(s, drop) for s in summaries)


@dataclass
class InstanceScore:
    id: int
    rouge1: float
    rouge2: float
    rougeL: float
    repeated: bool
    prediction: str


@dataclass
class MetricsReport:
    label: str
    rouge1: float
    rouge2: float
    rougeL: float
    repetition_count: int
    n_instances: int
    instances: list[InstanceScore] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("instances")
        return out

    def write_instances(self, path) -> None:
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "rouge1", "rouge2", "rougeL", "repeated_flag", "prediction"])
            for s in self.instances:
                w.writerow([s.id, repr(s.rouge1), repr(s.rouge2), repr(s.rougeL), int(s.repeated), s.prediction])


def read_instances(path) -> list[InstanceScore]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return [
            InstanceScore(int(r["id"]), float(r["rouge1"]), float(r["rouge2"]), float(r["rougeL"]),
                          r["repeated_flag"] == "1", r["prediction"])
            for r in csv.DictReader(fh)
        ]


def score_predictions(predictions: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                      label: str = "", stopwords: Iterable[str] | None = None) -> MetricsReport:
    """Average ROUGE F1 over instances and count repeated-word predictions."""
    if len(predictions) != len(references):
        raise ValueError("need exactly one prediction per reference")
    drop = frozenset(stopwords or ())
    rows = []
    for i, (pred, ref) in enumerate(zip(predictions, references)):
        rows.append(InstanceScore(
            i,
            rouge_n(pred, ref, 1).f1,
            rouge_n(pred, ref, 2).f1,
            rouge_l(pred, ref).f1,
            has_repetition(pred, drop),
            " ".join(pred),
        ))
    n = len(rows)
    mean = (lambda key: sum(getattr(r, key) for r in rows) / n) if n else (lambda key: 0.0)
    return MetricsReport(label, mean("rouge1"), mean("rouge2"), mean("rougeL"),
                         sum(r.repeated for r in rows), n, rows)


def evaluate(model, vocab, triples, limits=None, label: str = "", stopwords=None) -> MetricsReport:
    """Greedy-decode every raw triple and score against its tokenized reference summary."""
    from .corpus import Limits, tokenize
    from .model import greedy_decode

    limits = limits or Limits()
    if len(vocab) != model.config.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} entries but the model expects {model.config.vocab_size}")
    preds, refs = [], []
    for raw in triples:
        q = vocab.encode(tokenize(raw.query)[: limits.max_query])
        d = vocab.encode(tokenize(raw.document)[: limits.max_doc])
        if not q or not d:
            raise ValueError(f"empty query or document after tokenization: {raw.query[:60]!r}")
        trace = greedy_decode(model, q, d)
        preds.append(vocab.decode(trace.tokens))
        refs.append(tokenize(raw.summary))
    return score_predictions(preds, refs, label, stopwords)
