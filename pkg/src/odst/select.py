"""Pseudo-labeling, per-class thresholds and class-balanced top-k selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .calib import Calibration, apply_temperature
from .core import map_row_chunks, mix_with_uniform, rng, uniform
from .model import ClassifierModel, Mode, forward

log = logging.getLogger(__name__)

ABOVE_ONE = math.inf
"""Threshold sentinel: no confidence level reaches the requested precision."""


@dataclass(frozen=True)
class PoolAnnotation:
    probs: np.ndarray

    @property
    def predicted(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    def __len__(self):
        return self.probs.shape[0]


def pseudo_label_pool(teacher: ClassifierModel, calibration: Calibration, X) -> PoolAnnotation:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != teacher.sizes[0]:
        raise ValueError("pool dimension does not match the teacher input")
    logits = map_row_chunks(lambda c: forward(teacher, c), X)
    return PoolAnnotation(apply_temperature(logits, calibration))


def _nearest_rank(n: int, alpha: float) -> int:
    # round first so that e.g. 0.998 * 5000 lands on 4990, not 4991
    return min(n, max(1, math.ceil(round(alpha * n, 9))))


def ood_threshold(scores, alpha: float) -> float:
    """Nearest-rank alpha-quantile of class-c scores over all OOD validation samples."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("OOD validation set is empty")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return float(np.sort(scores)[_nearest_rank(scores.size, alpha) - 1])


def id_threshold(scores, is_class, alpha: float) -> float:
    """Smallest score s such that samples scoring >= s have class-c precision >= alpha.

    Precision is not monotone in s, so every distinct score is a candidate.
    Returns :data:`ABOVE_ONE` when no candidate qualifies.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_class = np.asarray(is_class, dtype=bool)
    if scores.size == 0:
        raise ValueError("in-distribution validation set is empty")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    hits = np.cumsum(is_class[order])
    # last position of each group of equal scores
    ends = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    precision = hits[ends] / (ends + 1)
    ok = precision >= alpha
    if not ok.any():
        return ABOVE_ONE
    return float(s[ends[np.nonzero(ok)[0][-1]]])


@dataclass(frozen=True)
class SelectionThresholds:
    ood: np.ndarray
    id: np.ndarray
    final: np.ndarray


def compute_thresholds(in_probs, in_labels, ood_probs, alpha: float, mode: Mode = Mode.ODST) -> SelectionThresholds:
    """Per-class thresholds; ST ignores the OOD threshold."""
    in_probs = np.asarray(in_probs)
    ood_probs = np.asarray(ood_probs)
    in_labels = np.asarray(in_labels)
    K = in_probs.shape[1]
    t_ood = np.array([ood_threshold(ood_probs[:, c], alpha) for c in range(K)])
    t_id = np.array([id_threshold(in_probs[:, c], in_labels == c, alpha) for c in range(K)])
    final = t_id.copy() if Mode(mode) is Mode.ST else np.maximum(t_id, t_ood)
    return SelectionThresholds(t_ood, t_id, final)


def k_schedule(N: int, K: int, t: int) -> int:
    if t < 0:
        raise ValueError("iteration must be non-negative")
    return (5 * N * (t + 1)) // K


@dataclass
class SelectionResult:
    """Selected pool indices per class with repetition counts.

    ``indices`` lists the unique accepted samples (class blocks in order,
    highest confidence first) and ``repeats`` how many times each occurs in
    the training set. ``expanded`` gives the index list with repetitions.
    """

    indices: np.ndarray
    repeats: np.ndarray
    classes: np.ndarray
    accepted: np.ndarray
    above_threshold: np.ndarray
    k: int
    thresholds: SelectionThresholds | None = None
    warnings: list = field(default_factory=list)

    @property
    def expanded(self) -> np.ndarray:
        return np.repeat(self.indices, self.repeats)

    @property
    def totals(self) -> np.ndarray:
        K = self.accepted.shape[0]
        return np.bincount(self.classes, weights=self.repeats, minlength=K).astype(np.int64)

    @property
    def repetitions(self) -> np.ndarray:
        return self.totals - self.accepted

    def __len__(self):
        return self.indices.shape[0]


def select_topk(ann: PoolAnnotation, final_thresholds, k: int, seed: int,
                thresholds: SelectionThresholds | None = None) -> SelectionResult:
    if k <= 0:
        raise ValueError("k must be positive")
    final_thresholds = np.asarray(final_thresholds, dtype=np.float64)
    pred, conf = ann.predicted, ann.confidence
    K = ann.K
    idx_parts, rep_parts, cls_parts = [], [], []
    accepted = np.zeros(K, dtype=np.int64)
    above = np.zeros(K, dtype=np.int64)
    warnings = []
    for c in range(K):
        cand = np.nonzero((pred == c) & (conf >= final_thresholds[c]))[0]
        above[c] = cand.size
        if cand.size == 0:
            msg = f"class {c}: no pool sample above threshold {final_thresholds[c]:.6g}; class contributes nothing"
            log.warning(msg)
            warnings.append(msg)
            continue
        # highest confidence first, smaller pool index on ties
        order = np.lexsort((cand, -conf[cand]))
        chosen = cand[order][:k]
        reps = np.ones(chosen.size, dtype=np.int64)
        if chosen.size < k:
            extra = rng(seed, "repeat", c).integers(0, chosen.size, size=k - chosen.size)
            reps += np.bincount(extra, minlength=chosen.size)
        accepted[c] = chosen.size
        idx_parts.append(chosen)
        rep_parts.append(reps)
        cls_parts.append(np.full(chosen.size, c, dtype=np.int64))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return SelectionResult(cat(idx_parts), cat(rep_parts), cat(cls_parts), accepted, above, k,
                           thresholds, warnings)


def assign_pseudo_labels(ann: PoolAnnotation, sel: SelectionResult, mode: Mode = Mode.ODST):
    """Soft labels for the selected samples and for the rest of the pool.

    Returns ``(q, rest_idx, v)``: ``q`` aligned with ``sel.indices``, ``v``
    aligned with ``rest_idx`` (all pool indices not selected, ascending).
    """
    mode = Mode(mode)
    q = ann.probs[sel.indices]
    mask = np.ones(len(ann), dtype=bool)
    mask[sel.indices] = False
    rest_idx = np.nonzero(mask)[0]
    p = ann.probs[rest_idx]
    if mode is Mode.ABLATE_HARD_U:
        v = np.broadcast_to(uniform(ann.K), p.shape).copy()
    elif mode is Mode.ABLATE_NO_SMOOTH:
        v = p.copy()
    else:
        v = mix_with_uniform(p, 0.5)
    return q, rest_idx, v
