"""Temperature scaling fitted by minimising expected calibration error."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InvariantError
from .model import softmax

T_MIN, T_MAX = 0.05, 20.0
GRID_POINTS = 400
N_BINS = 15
_GOLDEN = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class Calibration:
    temperature: float = 1.0

    def __post_init__(self):
        if not T_MIN <= self.temperature <= T_MAX:
            raise InvariantError(f"temperature {self.temperature} outside [{T_MIN}, {T_MAX}]")


def ece(probs, labels, bins: int = N_BINS) -> float:
    """Equal-width-bin ECE over max confidence.

    Bin b covers ``(b/B, (b+1)/B]``; confidence 0 falls in the first bin.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels)
    n = probs.shape[0]
    if n == 0:
        raise ValueError("ece needs at least one prediction")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    count = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    return float(np.abs(acc_sum - conf_sum).sum() / n)


def temperature_grid() -> np.ndarray:
    grid = np.geomspace(T_MIN, T_MAX, GRID_POINTS)
    return np.unique(np.append(grid, 1.0))


def fit_temperature(logits, labels, bins: int = N_BINS) -> Calibration:
    """Grid search over log-spaced temperatures, then one golden-section pass.

    The golden-section refinement searches log T between the grid
    neighbours of the best grid point and is kept only if it does not
    increase ECE. T=1 is on the grid, so the result never calibrates worse
    than the raw model.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if logits.shape[0] == 0:
        raise ValueError("validation set is empty")
    objective = lambda T: ece(softmax(logits / T), labels, bins)
    grid = temperature_grid()
    scores = np.array([objective(T) for T in grid])
    i = int(np.argmin(scores))
    best_T, best = float(grid[i]), float(scores[i])

    a = math.log(grid[max(i - 1, 0)])
    b = math.log(grid[min(i + 1, len(grid) - 1)])
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = objective(math.exp(c)), objective(math.exp(d))
    for _ in range(30):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = objective(math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = objective(math.exp(d))
    cand, fcand = (c, fc) if fc <= fd else (d, fd)
    if fcand < best:
        best_T = min(max(math.exp(cand), T_MIN), T_MAX)
    return Calibration(best_T)


def apply_temperature(logits, calibration: Calibration | float) -> np.ndarray:
    T = calibration.temperature if isinstance(calibration, Calibration) else float(calibration)
    if not T > 0:
        raise InvariantError("temperature must be positive")
    return softmax(np.asarray(logits, dtype=np.float64) / T)
