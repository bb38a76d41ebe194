"""Evaluation: test error, confidence AUROC, selection quality, per-iteration reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

import numpy as np
from scipy.stats import rankdata

from .core import Dataset


def test_error(probs, labels) -> float:
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("test set is empty")
    return float(np.mean(probs.argmax(axis=1) != labels))


test_error.__test__ = False  # not a pytest test when imported into test modules


def auroc(in_conf, ood_conf) -> float:
    """P(in > ood) + 0.5 P(in == ood) via average ranks (Mann-Whitney U)."""
    a = np.asarray(in_conf, dtype=np.float64).ravel()
    b = np.asarray(ood_conf, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs non-empty in- and out-distribution sets")
    ranks = rankdata(np.concatenate([a, b]), method="average")
    u = ranks[:a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def selection_precision(indices, pool: Dataset) -> float | None:
    """Fraction of unique selected samples drawn from in-distribution components."""
    indices = np.unique(np.asarray(indices, dtype=np.int64))
    if indices.size == 0:
        return None
    return float(pool.in_dist[indices].mean())


def selection_recall(indices, pool: Dataset) -> float | None:
    total = int(pool.in_dist.sum())
    if total == 0:
        return None
    indices = np.unique(np.asarray(indices, dtype=np.int64))
    return float(pool.in_dist[indices].sum() / total)


def label_accuracy(indices, pseudo_probs, pool: Dataset) -> float | None:
    """Among selected in-distribution samples, how often the pseudo-label argmax is the true class."""
    indices = np.asarray(indices, dtype=np.int64)
    pseudo_probs = np.atleast_2d(pseudo_probs)
    keep = pool.in_dist[indices] if indices.size else np.zeros(0, dtype=bool)
    if not keep.any():
        return None
    truth = pool.provenance[indices[keep]]
    return float(np.mean(pseudo_probs[keep].argmax(axis=1) == truth))


# -- reports --------------------------------------------------------------------

@dataclass
class IterationReport:
    iteration: int
    test_error: float
    auroc: float
    ece_before: float
    ece_after: float
    temperature: float
    accepted: tuple | None = None
    selection_precision: float | None = None
    selection_recall_in_pool: float | None = None
    label_accuracy: float | None = None

    def __post_init__(self):
        for name in ("test_error", "auroc", "ece_before", "ece_after",
                     "selection_precision", "selection_recall_in_pool", "label_accuracy"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.accepted is not None:
            self.accepted = tuple(int(a) for a in self.accepted)


METRICS_COLUMNS = [f.name for f in fields(IterationReport)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, tuple):
        return ";".join(str(a) for a in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in reports:
        w.writerow([_fmt(getattr(r, c)) for c in METRICS_COLUMNS])
    return buf.getvalue()


def reports_from_csv(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    opt = lambda s: None if s == "" else float(s)
    for row in rows:
        acc = row["accepted"]
        out.append(IterationReport(
            iteration=int(row["iteration"]),
            test_error=float(row["test_error"]),
            auroc=float(row["auroc"]),
            ece_before=float(row["ece_before"]),
            ece_after=float(row["ece_after"]),
            temperature=float(row["temperature"]),
            accepted=None if acc == "" else tuple(int(a) for a in acc.split(";")),
            selection_precision=opt(row["selection_precision"]),
            selection_recall_in_pool=opt(row["selection_recall_in_pool"]),
            label_accuracy=opt(row["label_accuracy"]),
        ))
    return out
