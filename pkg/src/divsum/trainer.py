"""Adam, the per-fold training loop and k-fold cross-validation."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .corpus import EOS, PAD, FoldPlan, Limits, RawTriple, Triple, Vocabulary, build_vocab, encode_all
from .metrics import MetricsReport, evaluate, lcs_length
from .model import Model, ModelConfig, greedy_decode, sequence_loss
from .tensor import Graph, Tensor, backward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> bool:
    """One bias-corrected Adam step, in place.  Skips (returns False) on non-finite gradients."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s at step %d; update skipped", name, state.t + 1)
            return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        params[name].data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


@dataclass
class TrainConfig:
    mode: str = "SD2"
    query_mode: str = "attention"
    embed_dim: int = 100
    hidden: int = 200
    batch_size: int = 32
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    patience: int | None = 5
    clip: float = 5.0
    seed: int = 0
    max_len: int = 30
    sd1_squash: bool = False
    store_raw_cell: bool = False
    sampling_prob: float = 0.0
    embed_trainable: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.hidden < 1 or self.embed_dim < 1:
            raise ValueError(f"batch size, epochs and dimensions must be positive: {self}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, embed_dim=self.embed_dim,
            dec_hidden=self.hidden, query_hidden=self.hidden, doc_hidden=self.hidden,
            mode=self.mode, query_mode=self.query_mode, sd1_squash=self.sd1_squash,
            store_raw_cell=self.store_raw_cell, embed_trainable=self.embed_trainable,
            sampling_prob=self.sampling_prob, max_len=self.max_len,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Model
    checkpoint: Checkpoint
    curves: list[tuple[int, float, float]]
    best_epoch: int

    def write_curves(self, path) -> None:
        write_curves(path, self.curves)


def write_curves(path, curves) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_rouge_l"])
        for epoch, loss, val in curves:
            w.writerow([epoch, repr(loss), repr(val)])


def read_curves(path) -> list[tuple[int, float, float]]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_rouge_l"])) for r in csv.DictReader(fh)]


def make_batches(triples: Sequence[Triple], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, bucket by document length, cut into batches, shuffle the batch order."""
    perm = rng.permutation(len(triples))
    ordered = sorted(perm.tolist(), key=lambda i: len(triples[i].doc_ids))
    batches = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    return [batches[j] for j in rng.permutation(len(batches))]


def validation_rouge_l(model: Model, triples: Sequence[Triple]) -> float:
    """Mean ROUGE-L F1 of greedy decodes against the gold summary ids."""
    total = 0.0
    for t in triples:
        pred = [i for i in greedy_decode(model, t.query_ids, t.doc_ids).tokens if i != EOS]
        ref = [i for i in t.summary_ids if i not in (EOS, PAD)]
        lcs = lcs_length(pred, ref)
        if pred and ref and lcs:
            p, r = lcs / len(pred), lcs / len(ref)
            total += 2 * p * r / (p + r)
    return total / len(triples)


def corpus_loss(model: Model, triples: Sequence[Triple]) -> float:
    """Token-weighted mean teacher-forced NLL."""
    total, tokens = 0.0, 0
    for t in triples:
        m = len(t.summary_ids)
        total += float(sequence_loss(Graph(record=False), model, t).data) * m
        tokens += m
    return total / tokens


def train_fold(config: TrainConfig, vocab: Vocabulary, train: Sequence[Triple], val: Sequence[Triple] = (),
               embedding: np.ndarray | None = None) -> TrainResult:
    """Train one model; keep the checkpoint with the best validation ROUGE-L.

    Without validation data the final parameters are kept.  Early stopping
    triggers once ``patience`` epochs have passed since the best one
    (``patience=None`` disables it).
    """
    if not train:
        raise ValueError("empty training split")
    init_seq, shuffle_seq, sample_seq = np.random.SeedSequence(config.seed).spawn(3)
    model = Model.init(config.model_config(len(vocab)), np.random.default_rng(init_seq), embedding)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    sample_rng = np.random.default_rng(sample_seq)
    params = model.trainable()
    adam = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)

    curves = []
    best, best_epoch, best_ckpt = -math.inf, 0, None
    for epoch in range(1, config.epochs + 1):
        total, tokens = 0.0, 0
        for b, batch in enumerate(make_batches(train, config.batch_size, shuffle_rng)):
            for p in params.values():
                p.grad = None
            for idx in batch:
                g = Graph()
                loss = sequence_loss(g, model, train[idx], sample_rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch {b}")
                backward(g, loss, seed=1.0 / len(batch))
                m = len(train[idx].summary_ids)
                total += value * m
                tokens += m
            grads = {k: (np.zeros(p.shape) if p.grad is None else p.grad) for k, p in params.items()}
            if "E" in grads:
                grads["E"][PAD] = 0.0
            clip_global_norm(grads, config.clip)
            adam_update(params, grads, adam)
        train_loss = total / tokens

        if val:
            score = validation_rouge_l(model, val)
            if score > best:
                best, best_epoch = score, epoch
                best_ckpt = Checkpoint.from_model(model, vocab, best, {"epoch": epoch})
        else:
            score = float("nan")
        curves.append((epoch, train_loss, score))
        log.info("epoch %d: train loss %.4f, val ROUGE-L %.4f", epoch, train_loss, score)
        if val and config.patience is not None and epoch - best_epoch >= config.patience:
            break

    if best_ckpt is None:
        best_epoch = curves[-1][0]
        best_ckpt = Checkpoint.from_model(model, vocab, None, {"epoch": best_epoch})
    best_ckpt.extra["train"] = config.to_dict()
    return TrainResult(best_ckpt.to_model(), best_ckpt, curves, best_epoch)


def run_label(mode: str, query_mode: str = "attention") -> str:
    """Row name for a (diversity mode, query mode) pair, e.g. ``Query_enc`` or ``SD2``."""
    mode = mode.upper()
    if mode == "NONE":
        return {"none": "Vanilla e-a-d", "static": "Query_enc", "attention": "Query_att"}[query_mode]
    return mode if query_mode == "attention" else f"{mode}/{query_mode}"


@dataclass
class CVReport:
    label: str
    folds: list[MetricsReport | None]
    errors: dict[int, str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return all(f is not None for f in self.folds)

    @property
    def mean(self) -> dict[str, float]:
        done = [f for f in self.folds if f is not None]
        if not done:
            return {}
        keys = ("rouge1", "rouge2", "rougeL", "repetition_count")
        return {k: sum(getattr(f, k) for f in done) / len(done) for k in keys}


def _run_fold(args) -> tuple[int, MetricsReport | None, str | None]:
    index, config, raws, fold, limits, min_count = args
    try:
        train_raw = [raws[i] for i in fold.train]
        vocab = build_vocab(train_raw, min_count)
        result = train_fold(config, vocab, encode_all(train_raw, vocab, limits),
                            encode_all([raws[i] for i in fold.validation], vocab, limits))
        report = evaluate(result.model, vocab, [raws[i] for i in fold.test], limits,
                          label=run_label(config.mode, config.query_mode))
        return index, report, None
    except Exception as exc:  # a failed fold is reported, not fatal
        log.exception("fold %d failed", index)
        return index, None, f"{type(exc).__name__}: {exc}"


def cross_validate(config: TrainConfig, plan: FoldPlan, raws: Sequence[RawTriple], limits: Limits = Limits(),
                   min_count: int = 2, workers: int = 1, folds: Sequence[int] | None = None) -> CVReport:
    """Train and test every fold independently and collect per-fold metrics."""
    chosen = list(range(plan.k)) if folds is None else list(folds)
    jobs = [(i, config, list(raws), plan.folds[i], limits, min_count) for i in chosen]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    report = CVReport(run_label(config.mode, config.query_mode), [r[1] for r in results])
    report.errors = {i: err for i, _, err in results if err}
    return report
