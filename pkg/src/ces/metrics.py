"""AUROC, accuracy, Welch's t-test and table emission."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC with half credit for ties, via one sort and average ranks."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ValueError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average rank (1-based) of each run of equal scores
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [s.size]])
    ranks = np.empty(s.size)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return float(np.mean((s >= threshold).astype(int) == y))


# -- Student t tail ---------------------------------------------------------------


def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def welch_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Welch's two-sample t statistic and two-sided p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least two observations")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if va + vb == 0.0:
        if a.mean() == b.mean():
            raise ValueError("both groups are constant and equal; t is undefined")
        raise ValueError("both groups have zero variance; t is infinite")
    t = float((a.mean() - b.mean()) / math.sqrt(va + vb))
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return t, t_two_sided_p(t, df)


# -- reports -----------------------------------------------------------------------


@dataclass
class EvalReport:
    run_id: str
    split: str
    auroc: float
    accuracy: float
    n: int
    seed: int
    variant: str
    samples: list[tuple[int, float, int]] = field(default_factory=list, repr=False)

    @classmethod
    def from_scores(cls, run_id: str, split: str, ids, scores, labels, seed: int, variant: str, threshold: float = 0.5) -> "EvalReport":
        ids, scores, labels = list(map(int, ids)), list(map(float, scores)), list(map(int, labels))
        return cls(
            run_id=run_id,
            split=split,
            auroc=auroc(scores, labels),
            accuracy=accuracy(scores, labels, threshold),
            n=len(scores),
            seed=seed,
            variant=variant,
            samples=list(zip(ids, scores, labels)),
        )

    def to_dict(self, with_samples: bool = False) -> dict:
        d = {k: getattr(self, k) for k in ("run_id", "variant", "split", "seed", "auroc", "accuracy", "n")}
        if with_samples:
            d["samples"] = [list(t) for t in self.samples]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        samples = [tuple(t) for t in d.get("samples", [])]
        return cls(d["run_id"], d["split"], d["auroc"], d["accuracy"], d["n"], d["seed"], d["variant"], samples)


CSV_COLUMNS = ("run_id", "variant", "split", "seed", "auroc", "accuracy", "n")


def _mean_std(xs: list[float]) -> tuple[float, float]:
    arr = np.asarray(xs, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def aggregate(reports: Sequence[EvalReport], order: Sequence[str] | None = None) -> list[dict]:
    """One row per variant: mean/std AUROC and accuracy per split, plus seed count."""
    by: dict[str, dict[str, list[EvalReport]]] = defaultdict(lambda: defaultdict(list))
    for r in reports:
        by[r.variant][r.split].append(r)
    variants = [v for v in (order or []) if v in by] + sorted(v for v in by if v not in (order or []))
    rows = []
    for v in variants:
        row = {"variant": v}
        for split, rs in sorted(by[v].items()):
            row[f"{split}_auroc"] = _mean_std([r.auroc for r in rs])
            row[f"{split}_accuracy"] = _mean_std([r.accuracy for r in rs])
            row[f"{split}_seeds"] = len(rs)
        rows.append(row)
    return rows


def markdown_table(
    reports: Sequence[EvalReport],
    order: Sequence[str] | None = None,
    baseline: str | None = None,
    alpha: float = 0.02,
    splits: Sequence[str] = ("val", "test"),
) -> str:
    """Rows per variant with mean ± std AUROC; with ``baseline`` adds a Welch p-value column on val."""
    rows = aggregate(reports, order)
    header = ["Model"] + [f"{s} AUROC" for s in splits] + [f"{s} Acc" for s in splits]
    if baseline:
        header.append(f"p vs {baseline} (val)")
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    val_by_variant = defaultdict(list)
    for r in reports:
        if r.split == "val":
            val_by_variant[r.variant].append(r.auroc)
    for row in rows:
        cells = [row["variant"]]
        for metric in ("auroc", "accuracy"):
            for s in splits:
                ms = row.get(f"{s}_{metric}")
                cells.append(f"{ms[0]:.4f} ± {ms[1]:.4f}" if ms else "*")
        if baseline:
            cells.append(_p_cell(val_by_variant.get(row["variant"], []), val_by_variant.get(baseline, []), alpha, row["variant"] == baseline))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _p_cell(a: list[float], b: list[float], alpha: float, same: bool) -> str:
    if same:
        return "-"
    try:
        _, p = welch_ttest(a, b)
    except ValueError:
        return "n/a"
    return f"**{p:.2e}**" if p < alpha else f"{p:.2e}"


def emit_report(
    reports: Sequence[EvalReport],
    path: str | Path,
    order: Sequence[str] | None = None,
    baseline: str | None = None,
) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (one row per run) and ``<path>.md`` (aggregated table)."""
    if not reports:
        raise ValueError("no reports to emit")
    base = Path(path)
    if base.suffix in (".csv", ".md"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    rank = {v: i for i, v in enumerate(order or [])}
    rows = sorted(reports, key=lambda r: (rank.get(r.variant, len(rank)), r.variant, r.split, r.seed, r.run_id))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.run_id, r.variant, r.split, r.seed, repr(float(r.auroc)), repr(float(r.accuracy)), r.n])
    csv_path, md_path = base.with_suffix(".csv"), base.with_suffix(".md")
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    md_path.write_text(markdown_table(rows, order, baseline), encoding="utf-8")
    return csv_path, md_path
