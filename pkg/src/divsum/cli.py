"""Command-line entry point: prepare, train, eval, summarize, gradcheck, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError
from .corpus import CorpusError, FoldPlan, Limits, Vocabulary, build_vocab, encode_all, load_triples, make_folds, \
    sanity_report, tokenize
from .diversity import DiversityMode
from .trainer import TrainConfig, run_label, train_fold

log = logging.getLogger("divsum")

MANIFEST = "manifest.json"
ALL_MODES = [m.value for m in DiversityMode]


# -- manifests -------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    argv: list = field(default_factory=list)
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = "running"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def finish(self, out_dir, status: str = "ok") -> None:
        self.finished = _now()
        self.status = status
        self.write(out_dir)

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        return cls(**json.loads(path.read_text(encoding="utf-8")))


def worker_cap(requested: int) -> int:
    """``requested`` workers, capped by DIVSUM_THREADS when it is set."""
    cap = os.environ.get("DIVSUM_THREADS")
    n = max(1, requested)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"DIVSUM_THREADS must be an integer, got {cap!r}") from None
    return n


# -- workdir layout ----------------------------------------------------------

def _work_settings(work: Path) -> dict:
    m = RunManifest.read(work)
    if m.command != "prepare":
        raise ValueError(f"{work} was not produced by 'prepare'")
    return m.config


def _limits(settings: dict) -> Limits:
    return Limits(**settings["limits"])


def run_dir_name(mode: str, query_mode: str) -> str:
    return f"{DiversityMode.parse(mode).value}-{query_mode}"


# -- prepare -------------------------------------------------------------------

def cmd_prepare(args) -> int:
    raws = load_triples(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    limits = Limits(args.max_doc, args.max_query, args.max_summary)
    config = {"folds": args.folds, "min_count": args.min_count, "group_by_query": args.group_by_query,
              "limits": asdict(limits)}
    manifest = RunManifest("prepare", config, args.seed, {"data": str(args.data)}, {"dir": str(out)}, args.argv)
    manifest.write(out)

    shutil.copyfile(args.data, out / "corpus.jsonl")
    groups = [r.query.strip().lower() for r in raws] if args.group_by_query else None
    plan = make_folds(len(raws), args.folds, args.seed, groups)
    plan.save(out / "folds.json")
    for i, fold in enumerate(plan.folds):
        vocab = build_vocab([raws[j] for j in fold.train], args.min_count)
        (out / f"vocab_{i}.json").write_text(json.dumps(vocab.to_json()) + "\n", encoding="utf-8")
    text, ok = sanity_report(raws)
    print(text)
    print(f"wrote {plan.k} folds and vocabularies to {out}")
    manifest.outputs.update(folds="folds.json", vocab=[f"vocab_{i}.json" for i in range(plan.k)],
                            corpus_matches_reference=ok)
    manifest.finish(out)
    return 0


# -- train ---------------------------------------------------------------------

def _train_config(args) -> TrainConfig:
    patience = None if args.patience < 0 else args.patience
    return TrainConfig(
        mode=DiversityMode.parse(args.mode).value, query_mode=args.query_mode, embed_dim=args.embed_dim,
        hidden=args.hidden, batch_size=args.batch, lr=args.lr, epochs=args.epochs, patience=patience,
        clip=args.clip, seed=args.seed, max_len=args.max_len, sd1_squash=args.sd1_squash,
        store_raw_cell=args.store_raw_cell, sampling_prob=args.sampling_prob,
        embed_trainable=not args.freeze_embeddings,
    )


def train_one(work: str, fold: int, config: dict, out: str, embeddings: str | None, argv: list) -> str:
    """Train a single fold into ``out``; everything needed to repeat it goes into the manifest."""
    work_p, out_p = Path(work), Path(out)
    out_p.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", {"work": str(work_p), "fold": fold, "embeddings": embeddings, "train": config},
                           config["seed"], {"work": str(work_p), "embeddings": embeddings}, {"dir": str(out_p)}, argv)
    manifest.write(out_p)
    try:
        settings = _work_settings(work_p)
        cfg = TrainConfig(**config)
        plan = FoldPlan.load(work_p / "folds.json")
        if not 0 <= fold < plan.k:
            raise ValueError(f"fold {fold} out of range for a {plan.k}-fold plan")
        raws = load_triples(work_p / "corpus.jsonl")
        vocab = Vocabulary.from_json(json.loads((work_p / f"vocab_{fold}.json").read_text(encoding="utf-8")))
        limits = _limits(settings)
        f = plan.folds[fold]
        train = encode_all([raws[i] for i in f.train], vocab, limits)
        val = encode_all([raws[i] for i in f.validation], vocab, limits)
        matrix = None
        if embeddings:
            from .embeddings import load_pretrained

            table, coverage = load_pretrained(embeddings, vocab, cfg.embed_dim,
                                              np.random.default_rng([cfg.seed, 7]), cfg.embed_trainable)
            matrix = table.matrix.data
            manifest.outputs["embedding_coverage"] = coverage
            log.info("pretrained embeddings cover %.1f%% of the vocabulary", 100 * coverage)
        result = train_fold(cfg, vocab, train, val, matrix)
        result.checkpoint.extra["fold"] = fold
        result.checkpoint.extra["label"] = run_label(cfg.mode, cfg.query_mode)
        result.checkpoint.save(out_p / "model.ckpt")
        result.write_curves(out_p / "curves.csv")
        manifest.outputs.update(checkpoint="model.ckpt", curves="curves.csv", best_epoch=result.best_epoch,
                                best_val_rouge_l=result.checkpoint.best_metric)
    except BaseException:
        manifest.finish(out_p, "failed")
        raise
    manifest.finish(out_p)
    return str(out_p / "model.ckpt")


def cmd_train(args) -> int:
    argv = args.argv
    if args.from_manifest:
        m = RunManifest.read(args.from_manifest)
        if m.command != "train":
            raise ValueError(f"{args.from_manifest} is a '{m.command}' manifest, not 'train'")
        out = args.out or m.outputs["dir"]
        ckpt = train_one(m.config["work"], m.config["fold"], m.config["train"], out, m.config["embeddings"], argv)
        print(ckpt)
        return 0
    if not args.work:
        raise ValueError("--work is required unless --from-manifest is given")
    work = Path(args.work)
    config = _train_config(args).to_dict()
    plan = FoldPlan.load(work / "folds.json")
    folds = list(range(plan.k)) if args.fold == "all" else [int(args.fold)]
    base = Path(args.out) if args.out else work / "runs" / run_dir_name(args.mode, args.query_mode)
    jobs = []
    for fold in folds:
        out = base / f"fold_{fold}" if (args.fold == "all" or not args.out) else base
        jobs.append((str(work), fold, config, str(out), args.embeddings, argv))
    workers = worker_cap(args.workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(train_one, *zip(*jobs)))
    else:
        paths = [train_one(*j) for j in jobs]
    for p in paths:
        print(p)
    return 0


# -- eval ------------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .metrics import STOPWORDS, evaluate

    ckpt_path = Path(args.checkpoint)
    if ckpt_path.is_dir():
        ckpt_path = ckpt_path / "model.ckpt"
    ckpt = Checkpoint.load(ckpt_path)
    fold = args.fold if args.fold is not None else ckpt.extra.get("fold")
    if fold is None:
        raise ValueError("--fold is required for checkpoints that do not record one")
    out = Path(args.out) if args.out else ckpt_path.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    config = {"fold": fold, "split": args.split, "stopwords": args.stopwords}
    manifest = RunManifest("eval", config, None, {"checkpoint": str(ckpt_path), "work": args.work},
                           {"dir": str(out)}, args.argv)
    manifest.write(out)

    work = Path(args.work)
    limits = _limits(_work_settings(work))
    plan = FoldPlan.load(work / "folds.json")
    raws = load_triples(work / "corpus.jsonl")
    split = getattr(plan.folds[fold], args.split)
    model = ckpt.to_model()
    label = ckpt.extra.get("label") or run_label(model.config.mode, model.config.query_mode)
    report = evaluate(model, ckpt.vocabulary(), [raws[i] for i in split], limits, label,
                      STOPWORDS if args.stopwords else None)
    report.write_instances(out / "instances.csv")
    summary = report.summary()
    summary.update(fold=fold, split=args.split, stopwords=args.stopwords, checkpoint=str(ckpt_path))
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{label}\tfold {fold}\t{args.split}\tR1 {report.rouge1:.4f}\tR2 {report.rouge2:.4f}\t"
          f"RL {report.rougeL:.4f}\trepeated {report.repetition_count}/{report.n_instances}")
    manifest.outputs.update(metrics="metrics.json", instances="instances.csv")
    manifest.finish(out)
    return 0


# -- summarize ---------------------------------------------------------------

def cmd_summarize(args) -> int:
    from .model import greedy_decode

    ckpt = Checkpoint.load(args.checkpoint)
    model, vocab = ckpt.to_model(), ckpt.vocabulary()
    q_tokens = tokenize(args.query)[:args.max_query]
    d_tokens = tokenize(args.document)[:args.max_doc]
    if not q_tokens or not d_tokens:
        raise ValueError("query and document must contain at least one token")
    trace = greedy_decode(model, vocab.encode(q_tokens), vocab.encode(d_tokens), args.max_len)
    words = vocab.decode(trace.tokens, strip=False)
    print(" ".join(vocab.decode(trace.tokens)))
    for t, word in enumerate(words):
        alpha = trace.doc_weights[t]
        top = np.argsort(-alpha, kind="stable")[:args.top]
        doc = ", ".join(f"{d_tokens[i]}:{alpha[i]:.3f}" for i in top)
        line = f"{t + 1:>3} {word:<15} doc[{doc}]"
        if trace.query_weights:
            beta = trace.query_weights[t]
            qtop = np.argsort(-beta, kind="stable")[:args.top]
            line += " query[" + ", ".join(f"{q_tokens[i]}:{beta[i]:.3f}" for i in qtop) + "]"
        print(line)
    return 0


# -- gradcheck ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .checks import gradcheck

    modes = ALL_MODES if args.mode.lower() == "all" else [DiversityMode.parse(args.mode).value]
    worst = 0.0
    for mode in modes:
        cases = gradcheck(mode, args.dims, range(args.seed, args.seed + args.seeds), args.step,
                          args.coords or None, args.query_mode)
        top = max(cases, key=lambda c: c.error)
        worst = max(worst, top.error)
        flag = "ok" if top.error < args.tol else "FAIL"
        print(f"{mode}\tmax relative error {top.error:.3e} (seed {top.seed})\t{flag}")
    print(f"max relative error {worst:.3e}")
    return 0 if worst < args.tol else 1


# -- report ------------------------------------------------------------------------

def cmd_report(args) -> int:
    from .report import build_report

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("report", {"figures": not args.no_figures}, None, {"runs": list(args.runs)},
                           {"dir": str(out)}, args.argv)
    manifest.write(out)
    text = build_report(args.runs, out, figures=not args.no_figures)
    print(text["rouge"])
    print(text["repetitions"], end="")
    manifest.outputs.update(tables=["rouge.csv", "repetitions.csv", "tables.txt"],
                            figures=[] if args.no_figures else ["rouge.png", "repetitions.png", "curves.png"])
    manifest.finish(out)
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divsum", description="Query-based abstractive summarization with diversity attention.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="split a triple file into folds and build per-fold vocabularies")
    s.add_argument("--data", required=True, help="JSONL with query, document, summary fields")
    s.add_argument("--out", required=True)
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-count", type=int, default=2)
    s.add_argument("--group-by-query", action="store_true", help="keep triples sharing a query in one slice")
    s.add_argument("--max-doc", type=int, default=Limits.max_doc)
    s.add_argument("--max-query", type=int, default=Limits.max_query)
    s.add_argument("--max-summary", type=int, default=Limits.max_summary)
    s.set_defaults(func=cmd_prepare)

    d = TrainConfig()
    s = sub.add_parser("train", help="train one fold (or all) and keep the best-validation checkpoint")
    s.add_argument("--work", help="directory written by prepare")
    s.add_argument("--fold", default="0", help="fold index or 'all'")
    s.add_argument("--mode", default=d.mode, type=str.upper, choices=ALL_MODES)
    s.add_argument("--query-mode", default=d.query_mode, choices=["attention", "static", "none"])
    s.add_argument("--hidden", type=int, default=d.hidden)
    s.add_argument("--embed-dim", type=int, default=d.embed_dim)
    s.add_argument("--batch", type=int, default=d.batch_size)
    s.add_argument("--lr", type=float, default=d.lr)
    s.add_argument("--epochs", type=int, default=d.epochs)
    s.add_argument("--patience", type=int, default=d.patience, help="negative disables early stopping")
    s.add_argument("--clip", type=float, default=d.clip)
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--max-len", type=int, default=d.max_len)
    s.add_argument("--sd1-squash", action="store_true", help="pass the SD1 gate through a sigmoid")
    s.add_argument("--store-raw-cell", action="store_true", help="D2/SD2: carry the raw cell, not the orthogonalized one")
    s.add_argument("--sampling-prob", type=float, default=d.sampling_prob)
    s.add_argument("--embeddings", help="GloVe-format text file for initialisation")
    s.add_argument("--freeze-embeddings", action="store_true")
    s.add_argument("--out", help="output directory (default WORK/runs/MODE-QUERYMODE/fold_i)")
    s.add_argument("--workers", type=int, default=1, help="parallel folds with --fold all (capped by DIVSUM_THREADS)")
    s.add_argument("--from-manifest", help="repeat a previous train run exactly")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="decode a split with a checkpoint and score it")
    s.add_argument("--work", required=True)
    s.add_argument("--checkpoint", required=True, help="model.ckpt or its run directory")
    s.add_argument("--fold", type=int)
    s.add_argument("--split", default="test", choices=["test", "validation", "train"])
    s.add_argument("--stopwords", action="store_true", help="ignore stopwords when counting repetitions")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("summarize", help="summarize one document for one query")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--document", required=True)
    s.add_argument("--max-len", type=int)
    s.add_argument("--max-doc", type=int, default=Limits.max_doc)
    s.add_argument("--max-query", type=int, default=Limits.max_query)
    s.add_argument("--top", type=int, default=3, help="attention entries shown per step")
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    s.add_argument("--dims", type=int, default=5)
    s.add_argument("--mode", default="all")
    s.add_argument("--query-mode", default="attention", choices=["attention", "static", "none"])
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--step", type=float, default=1e-3)
    s.add_argument("--coords", type=int, default=1, help="coordinates probed per tensor; 0 probes all")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="tables and figures from eval results")
    s.add_argument("--runs", nargs="+", required=True, help="directories searched for metrics.json")
    s.add_argument("--out", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CorpusError, CheckpointError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"divsum {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
