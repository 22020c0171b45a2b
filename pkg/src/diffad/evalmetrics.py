"""AUC-ROC with midrank ties, ROC curves and benchmark result tables."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from diffad.errors import MetricError


@dataclass(frozen=True)
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel()
        if s.shape != y.shape:
            raise MetricError(f"{s.size} scores but {y.size} labels")
        if not np.all((y == 0) | (y == 1)):
            raise MetricError("labels must be 0 (normal) or 1 (anomaly)")
        if np.any(np.isnan(s)):
            raise MetricError("scores contain NaN")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int8))

    def class_counts(self) -> tuple[int, int]:
        n1 = int(self.labels.sum())
        n0 = self.labels.size - n1
        if n1 == 0 or n0 == 0:
            raise MetricError("AUC needs at least one normal and one anomaly")
        return n0, n1


def auc_roc(scores, labels=None) -> float:
    """Mann-Whitney AUC: (sum of anomaly midranks - n1(n1+1)/2) / (n1 n0)."""
    ls = scores if isinstance(scores, LabeledScores) else LabeledScores(scores, labels)
    n0, n1 = ls.class_counts()
    ranks = rankdata(ls.scores, method="average")
    u = ranks[ls.labels == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_points(scores, labels=None) -> list[tuple[float, float]]:
    """(FPR, TPR) at each distinct threshold, descending; tied scores move diagonally."""
    ls = scores if isinstance(scores, LabeledScores) else LabeledScores(scores, labels)
    n0, n1 = ls.class_counts()
    order = np.argsort(-ls.scores, kind="stable")
    s, y = ls.scores[order], ls.labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return [(0.0, 0.0)] + [(float(f / n0), float(t / n1)) for f, t in zip(fp, tp)]


def trapezoid_area(points) -> float:
    pts = np.asarray(points)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


@dataclass(frozen=True)
class BenchmarkResult:
    method: str
    dataset: str
    seed: int
    auc: float | None
    seconds: float
    error: str | None = None


@dataclass(frozen=True)
class AggregateRow:
    method: str
    dataset: str
    mean_auc: float
    std_auc: float
    n: int


def aggregate(results) -> list[AggregateRow]:
    """Mean and population std of AUC per (dataset, method); failed cells are skipped."""
    groups: dict[tuple[str, str], list[float]] = defaultdict(list)
    for r in results:
        if r.auc is not None:
            groups[(r.dataset, r.method)].append(r.auc)
    rows = []
    for (dataset, method) in sorted(groups):
        vals = np.sort(np.array(groups[(dataset, method)]))
        rows.append(AggregateRow(method, dataset, float(vals.mean()), float(vals.std()), vals.size))
    return rows


CSV_HEADER = ("method", "dataset", "seed", "auc", "seconds")


def results_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        auc = "error" if r.auc is None else repr(r.auc)
        w.writerow([r.method, r.dataset, r.seed, auc, f"{r.seconds:.3f}"])
    return buf.getvalue()


def markdown_table(rows: list[AggregateRow], methods: list[str] | None = None) -> str:
    """Datasets as rows, methods as columns, AUC in percent; best per row in bold."""
    if methods is None:
        methods = sorted({r.method for r in rows})
    datasets = sorted({r.dataset for r in rows})
    cell = {(r.dataset, r.method): r for r in rows}
    lines = [
        "AUC-ROC (%), mean over seeds; std is the population std (1/n).",
        "",
        "| Dataset | " + " | ".join(methods) + " |",
        "|---|" + "---|" * len(methods),
    ]
    for ds in datasets:
        vals = [round(cell[(ds, m)].mean_auc * 100, 2) if (ds, m) in cell else None for m in methods]
        best = max((v for v in vals if v is not None), default=None)
        parts = []
        for m, v in zip(methods, vals):
            if v is None:
                parts.append("n/a")
                continue
            txt = f"{v:.2f} ± {cell[(ds, m)].std_auc * 100:.2f}"
            parts.append(f"**{txt}**" if math.isclose(v, best) else txt)
        lines.append(f"| {ds} | " + " | ".join(parts) + " |")
    return "\n".join(lines) + "\n"
