"""Aggregate per-fold evaluation files into the ROUGE and repetition tables, plus figures.

Only files written by ``train`` (``curves.csv``) and ``eval`` (``metrics.json``)
are read; no model is ever run here.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .trainer import read_curves

# Published reference values (ROUGE-1, ROUGE-2, ROUGE-L), in row order.
REFERENCE_ROUGE = {
    "Vanilla e-a-d": (13.73, 2.06, 12.84),
    "Query_enc": (20.87, 3.39, 19.38),
    "Query_att": (29.28, 10.24, 28.21),
    "B1": (23.18, 6.46, 22.03),
    "M1": (33.06, 13.35, 32.17),
    "M2": (18.42, 4.47, 17.45),
    "D1": (33.85, 13.65, 32.99),
    "SD1": (31.36, 11.23, 30.5),
    "D2": (38.12, 16.76, 37.31),
    "SD2": (41.26, 18.75, 40.43),
}
# Published average number of summaries with a repeated word.
REFERENCE_REPETITIONS = {"Query_att": 498, "SD1": 352, "SD2": 344, "D1": 191, "D2": 179}

ROUGE_COLUMNS = ("rouge1", "rouge2", "rougeL")


@dataclass
class Aggregate:
    label: str
    folds: list[int] = field(default_factory=list)
    rouge1: float = math.nan
    rouge2: float = math.nan
    rougeL: float = math.nan
    repetitions: float = math.nan
    instances: int = 0


def find_metrics(roots: Iterable) -> list[Path]:
    found = []
    for root in roots:
        root = Path(root)
        found.extend(sorted(root.rglob("metrics.json")) if root.is_dir() else [root])
    return found


def load_metrics(paths: Iterable) -> list[dict]:
    rows = []
    for p in paths:
        obj = json.loads(Path(p).read_text(encoding="utf-8"))
        obj["_path"] = str(p)
        rows.append(obj)
    return rows


def aggregate(rows: Sequence[dict]) -> dict[str, Aggregate]:
    """Average ROUGE F1 (as percentages) and repetition counts over folds, per label."""
    groups: dict[str, list[dict]] = defaultdict(list)
    for r in rows:
        groups[r["label"]].append(r)
    out = {}
    for label, items in groups.items():
        seen = {}
        for r in items:
            fold = r.get("fold")
            if fold in seen:
                raise ValueError(f"{label}: fold {fold} evaluated twice ({seen[fold]} and {r['_path']})")
            seen[fold] = r.get("_path")
        n = len(items)
        agg = Aggregate(label, sorted(f for f in seen if f is not None))
        for col in ROUGE_COLUMNS:
            setattr(agg, col, 100.0 * sum(r[col] for r in items) / n)
        agg.repetitions = sum(r["repetition_count"] for r in items) / n
        agg.instances = sum(r["n_instances"] for r in items)
        out[label] = agg
    return out


def _ordered(labels: Iterable[str], canonical: Sequence[str]) -> list[str]:
    labels = set(labels)
    return [x for x in canonical if x in labels] + sorted(labels - set(canonical))


def rouge_table(aggs: dict[str, Aggregate], include_reference: bool = True) -> list[dict]:
    rows = []
    for label in _ordered(aggs, list(REFERENCE_ROUGE)):
        a = aggs[label]
        row = {"model": label, "folds": len(a.folds) or 1,
               "rouge1": a.rouge1, "rouge2": a.rouge2, "rougeL": a.rougeL}
        if include_reference:
            ref = REFERENCE_ROUGE.get(label, (math.nan,) * 3)
            row.update(ref_rouge1=ref[0], ref_rouge2=ref[1], ref_rougeL=ref[2])
        rows.append(row)
    return rows


def repetition_table(aggs: dict[str, Aggregate], include_reference: bool = True) -> list[dict]:
    rows = []
    for label in _ordered(aggs, list(REFERENCE_REPETITIONS)):
        a = aggs[label]
        row = {"model": label, "folds": len(a.folds) or 1, "repeated": a.repetitions,
               "instances_per_fold": a.instances / max(len(a.folds), 1)}
        if include_reference:
            row["ref_repeated"] = REFERENCE_REPETITIONS.get(label, math.nan)
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "-" if math.isnan(v) else f"{v:.2f}"
    return str(v)


def to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def to_text(rows: Sequence[dict], title: str) -> str:
    """Pipe-delimited table for terminals."""
    if not rows:
        return f"{title}\n(no results)\n"
    cols = list(rows[0])
    cells = [cols] + [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = [title]
    for n, row in enumerate(cells):
        lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)))
        if n == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# -- figures ---------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_rouge(rows: Sequence[dict], path) -> None:
    """Grouped bars per model; hollow markers show the published values."""
    plt = _pyplot()
    labels = [r["model"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.9 * len(labels) + 2), 4.0))
    width = 0.27
    for k, col in enumerate(ROUGE_COLUMNS):
        xs = [i + (k - 1) * width for i in range(len(rows))]
        ax.bar(xs, [r[col] for r in rows], width, label=col.replace("rouge", "ROUGE-"))
        refs = [r.get(f"ref_{col}", math.nan) for r in rows]
        ax.scatter(xs, refs, marker="_", s=120, color="black", zorder=3,
                   label="published" if k == 0 else None)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("F1 (%)")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_repetitions(rows: Sequence[dict], path) -> None:
    plt = _pyplot()
    labels = [r["model"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * len(labels) + 2), 3.5))
    ax.bar(range(len(rows)), [r["repeated"] for r in rows], color="tab:gray")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("summaries with a repeated word")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curves(curves: dict[str, list[Path]], path) -> None:
    """Training loss and validation ROUGE-L per epoch; one line per (label, fold)."""
    plt = _pyplot()
    fig, (left, right) = plt.subplots(1, 2, figsize=(9.0, 3.5))
    for label in sorted(curves):
        for p in curves[label]:
            rows = read_curves(p)
            epochs = [r[0] for r in rows]
            name = f"{label} ({p.parent.name})"
            left.plot(epochs, [r[1] for r in rows], label=name)
            right.plot(epochs, [r[2] for r in rows], label=name)
    left.set_xlabel("epoch")
    left.set_ylabel("training loss per token")
    right.set_xlabel("epoch")
    right.set_ylabel("validation ROUGE-L")
    if curves:
        left.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def find_curves(rows: Sequence[dict]) -> dict[str, list[Path]]:
    """``curves.csv`` next to each evaluated checkpoint, when the run directory has one."""
    out: dict[str, list[Path]] = defaultdict(list)
    for r in rows:
        ckpt = r.get("checkpoint")
        if not ckpt:
            continue
        p = Path(ckpt).parent / "curves.csv"
        if p.exists() and p not in out[r["label"]]:
            out[r["label"]].append(p)
    return dict(out)


def build_report(roots: Iterable, out_dir, figures: bool = True) -> dict[str, str]:
    """Write the tables as CSV and text, and the figures as PNG; returns the text tables."""
    out_dir = Path(out_dir)
    rows = load_metrics(find_metrics(roots))
    if not rows:
        raise FileNotFoundError("no metrics.json files found under the given run directories")
    aggs = aggregate(rows)
    rouge = rouge_table(aggs)
    reps = repetition_table(aggs)
    (out_dir / "rouge.csv").write_text(to_csv(rouge), encoding="utf-8")
    (out_dir / "repetitions.csv").write_text(to_csv(reps), encoding="utf-8")
    text = {
        "rouge": to_text(rouge, "ROUGE F1 (%) averaged over folds; ref_* are published values"),
        "repetitions": to_text(reps, "Summaries with a repeated word, averaged over folds"),
    }
    (out_dir / "tables.txt").write_text(text["rouge"] + "\n" + text["repetitions"], encoding="utf-8")
    if figures:
        plot_rouge(rouge, out_dir / "rouge.png")
        plot_repetitions(reps, out_dir / "repetitions.png")
        plot_curves(find_curves(rows), out_dir / "curves.png")
    return text
