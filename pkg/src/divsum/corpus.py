"""Triples on disk, tokenization, vocabulary and cross-validation folds."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, SOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
FIELDS = ("query", "document", "summary")

# Average words per document/summary/query in the debatepedia triples.
REFERENCE_LENGTHS = {"document": 66.4, "summary": 11.16, "query": 9.97}
REFERENCE_COUNT = 12695

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class RawTriple:
    query: str
    document: str
    summary: str

    def __post_init__(self):
        for name in FIELDS:
            if not getattr(self, name).strip():
                raise CorpusError(f"field {name!r} is empty")


@dataclass(frozen=True)
class Triple:
    query_ids: tuple[int, ...]
    doc_ids: tuple[int, ...]
    summary_ids: tuple[int, ...]


@dataclass(frozen=True)
class Limits:
    max_doc: int = 120
    max_query: int = 25
    max_summary: int = 30

    def __post_init__(self):
        if min(self.max_doc, self.max_query, self.max_summary) < 1:
            raise ValueError(f"limits must be positive: {self}")


def load_triples(path) -> list[RawTriple]:
    """Read a JSONL file of ``{"query", "document", "summary"}`` objects.

    All problems are collected and raised together, each tagged with its
    1-based line number.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw[: exc.start].count(b"\n") + 1
        raise CorpusError(f"{path}:{line}: not valid UTF-8") from exc

    triples, problems = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"{path}:{lineno}: bad JSON ({exc.msg})")
            continue
        if not isinstance(obj, dict):
            problems.append(f"{path}:{lineno}: expected an object")
            continue
        missing = [k for k in FIELDS if not isinstance(obj.get(k), str)]
        if missing:
            problems.append(f"{path}:{lineno}: missing or non-string field(s) {', '.join(missing)}")
            continue
        try:
            triples.append(RawTriple(obj["query"], obj["document"], obj["summary"]))
        except CorpusError as exc:
            problems.append(f"{path}:{lineno}: {exc}")
    if problems:
        raise CorpusError("\n".join(problems))
    if not triples:
        raise CorpusError(f"{path}: no triples found")
    return triples


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation into its own tokens, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i == EOS:
                break
            if strip and i in (PAD, SOS):
                continue
            out.append(self.tokens[i])
        return out

    def to_json(self) -> dict:
        return {"tokens": self.tokens}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(list(obj["tokens"]))


def build_vocab(triples: Sequence[RawTriple], min_count: int = 2) -> Vocabulary:
    """Vocabulary from (training) triples; ids ordered by frequency then token."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if not triples:
        raise CorpusError("cannot build a vocabulary from an empty training set")
    counts: Counter[str] = Counter()
    for t in triples:
        for name in FIELDS:
            counts.update(tokenize(getattr(t, name)))
    kept = sorted((tok for tok, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept)


def encode_triple(raw: RawTriple, vocab: Vocabulary, limits: Limits = Limits()) -> Triple | None:
    """Tokenize, truncate and map to ids.  Returns None (with a warning) if a field tokenizes to nothing."""
    q = tokenize(raw.query)[: limits.max_query]
    d = tokenize(raw.document)[: limits.max_doc]
    s = tokenize(raw.summary)[: limits.max_summary]
    if not (q and d and s):
        log.warning("skipping triple with an empty field after tokenization: %r", raw.query[:60])
        return None
    return Triple(tuple(vocab.encode(q)), tuple(vocab.encode(d)), tuple(vocab.encode(s)) + (EOS,))


def encode_all(raws: Sequence[RawTriple], vocab: Vocabulary, limits: Limits = Limits()) -> list[Triple]:
    encoded = (encode_triple(r, vocab, limits) for r in raws)
    return [t for t in encoded if t is not None]


@dataclass(frozen=True)
class Fold:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    k: int
    folds: tuple[Fold, ...]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "k": self.k,
            "folds": [
                {"train": list(f.train), "validation": list(f.validation), "test": list(f.test)}
                for f in self.folds
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FoldPlan":
        folds = tuple(
            Fold(tuple(f["train"]), tuple(f["validation"]), tuple(f["test"])) for f in obj["folds"]
        )
        return cls(int(obj["seed"]), int(obj["k"]), folds)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def make_folds(count: int, k: int = 10, seed: int = 0, groups: Sequence | None = None) -> FoldPlan:
    """Seeded k-fold plan: test = slice i, validation = slice (i+1) mod k, train = rest.

    When ``groups`` is given (one label per triple, e.g. the query text) whole
    groups are dealt to slices so that no group straddles train and test.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if count < k:
        raise ValueError(f"need at least k={k} triples, got {count}")
    rng = np.random.default_rng(seed)
    if groups is None:
        slices = [s.tolist() for s in np.array_split(rng.permutation(count), k)]
    else:
        if len(groups) != count:
            raise ValueError("one group label per triple is required")
        members: dict = {}
        for i, g in enumerate(groups):
            members.setdefault(g, []).append(i)
        labels = list(members)
        if len(labels) < k:
            raise ValueError(f"need at least k={k} groups, got {len(labels)}")
        slices = [[] for _ in range(k)]
        # largest groups first, each to the currently smallest slice
        order = sorted(rng.permutation(len(labels)), key=lambda j: -len(members[labels[j]]))
        for j in order:
            target = min(range(k), key=lambda s: (len(slices[s]), s))
            slices[target].extend(members[labels[j]])
    folds = []
    for i in range(k):
        test = slices[i]
        if k == 2:
            # two slices cannot also hold a validation slice; carve it from the other one
            rest = slices[1 - i]
            cut = max(1, len(rest) // 8)
            val, train = rest[:cut], rest[cut:]
        else:
            val = slices[(i + 1) % k]
            train = [x for j, s in enumerate(slices) if j not in (i, (i + 1) % k) for x in s]
        folds.append(Fold(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test))))
    return FoldPlan(seed, k, tuple(folds))


def corpus_stats(triples: Sequence[RawTriple]) -> dict[str, float]:
    """Mean token counts per field plus the number of triples."""
    n = len(triples)
    stats = {name: sum(len(tokenize(getattr(t, name))) for t in triples) / max(n, 1) for name in FIELDS}
    stats["count"] = n
    return stats


def sanity_report(triples: Sequence[RawTriple], tolerance: float = 0.15) -> tuple[str, bool]:
    """Compare corpus statistics against the published debatepedia figures."""
    stats = corpus_stats(triples)
    lines = [f"triples: {stats['count']} (reference {REFERENCE_COUNT})"]
    ok = True
    for name in ("document", "summary", "query"):
        ref = REFERENCE_LENGTHS[name]
        rel = (stats[name] - ref) / ref
        flag = "ok" if abs(rel) <= tolerance else "OUT OF RANGE"
        ok &= abs(rel) <= tolerance
        lines.append(f"mean {name} tokens: {stats[name]:.2f} (reference {ref}, {rel:+.1%} off) {flag}")
    return "\n".join(lines), ok


def toy_corpus_path() -> Path:
    """The bundled 20-triple corpus used by the overfit check and the examples."""
    return Path(__file__).with_name("data") / "toy.jsonl"
