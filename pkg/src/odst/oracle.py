"""Bayes-optimal predictions for the outlier-exposure base objective and its iterates.

All formulas are homogeneous of degree zero in the two densities, so
:func:`oracle_points` rescales them jointly (in log space) before
exponentiating; this keeps far-away points from underflowing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import synth
from .core import check_prob, rng


class OracleDomainError(ValueError):
    """Both densities are zero, so no prediction is defined."""


@dataclass(frozen=True)
class OraclePoint:
    p_in_density: float
    p_all_density: float
    class_posterior: np.ndarray

    def __post_init__(self):
        post = check_prob(self.class_posterior, "class_posterior")
        if self.p_in_density < 0 or self.p_all_density < 0:
            raise ValueError("densities must be non-negative")
        if self.p_in_density == 0:
            post = np.full(post.shape, 1.0 / post.shape[0])
        object.__setattr__(self, "class_posterior", post)

    @property
    def K(self) -> int:
        return self.class_posterior.shape[0]

    @property
    def r(self) -> float:
        total = self.p_in_density + self.p_all_density
        if not total > 0:
            raise OracleDomainError("p_in(x) + p_all(x) must be positive")
        return self.p_all_density / total


def bayes_base(pt: OraclePoint) -> np.ndarray:
    pin, pall, post = pt.p_in_density, pt.p_all_density, pt.class_posterior
    if not pin + pall > 0:
        raise OracleDomainError("p_in(x) + p_all(x) must be positive")
    return (post * pin + pall / pt.K) / (pin + pall)


def bayes_iter_closed(pt: OraclePoint, t: int) -> np.ndarray:
    if t < 0:
        raise ValueError("iteration must be non-negative")
    post = pt.class_posterior
    return post + pt.r ** (t + 1) * (1.0 / pt.K - post)


def bayes_iter_recursive(pt: OraclePoint, t: int) -> np.ndarray:
    """Iterate the one-step Bayes update from the base prediction ``t`` times."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    p = bayes_base(pt)
    for _ in range(t):
        p = recursive_step(pt, p)
    return p


def recursive_step(pt: OraclePoint, prev: np.ndarray) -> np.ndarray:
    pin, pall = pt.p_in_density, pt.p_all_density
    return (pin * pt.class_posterior + pall * prev) / (pin + pall)


def bayes_limit(pt: OraclePoint) -> np.ndarray:
    if not pt.p_in_density + pt.p_all_density > 0:
        raise OracleDomainError("p_in(x) + p_all(x) must be positive")
    if pt.p_in_density > 0:
        return pt.class_posterior.copy()
    return np.full(pt.K, 1.0 / pt.K)


# -- vectorised forms over many points ------------------------------------------

@dataclass(frozen=True)
class OracleBatch:
    """Jointly rescaled densities and class posteriors for n points."""

    p_in: np.ndarray
    p_all: np.ndarray
    posterior: np.ndarray

    def __len__(self):
        return self.p_in.shape[0]

    def point(self, i: int) -> OraclePoint:
        return OraclePoint(float(self.p_in[i]), float(self.p_all[i]), self.posterior[i])

    @property
    def r(self) -> np.ndarray:
        return self.p_all / (self.p_in + self.p_all)

    def closed(self, t: int) -> np.ndarray:
        K = self.posterior.shape[1]
        return self.posterior + (self.r ** (t + 1))[:, None] * (1.0 / K - self.posterior)

    def base(self) -> np.ndarray:
        K = self.posterior.shape[1]
        return (self.posterior * self.p_in[:, None] + self.p_all[:, None] / K) / (self.p_in + self.p_all)[:, None]

    def recursive(self, t: int) -> np.ndarray:
        p = self.base()
        s = (self.p_in + self.p_all)[:, None]
        for _ in range(t):
            p = (self.p_in[:, None] * self.posterior + self.p_all[:, None] * p) / s
        return p

    def limit(self) -> np.ndarray:
        K = self.posterior.shape[1]
        return np.where((self.p_in > 0)[:, None], self.posterior, 1.0 / K)


def oracle_points(world: synth.WorldSpec, X) -> OracleBatch:
    lin = synth.log_density_in(world, X)
    lall = synth.log_density_all(world, X)
    scale = np.maximum(lin, lall)
    pin = np.exp(lin - scale)
    post = synth.posterior_in(world, X)
    post[pin == 0] = 1.0 / world.K
    return OracleBatch(pin, np.exp(lall - scale), post)


def evaluation_points(world: synth.WorldSpec, seed: int, grid: int = 101, n_samples: int = 10_000):
    """The seeded evaluation set: a grid over the world's bounding box plus p_all samples.

    Only two-dimensional worlds get the grid; others use samples alone.
    """
    parts = []
    if world.d == 2 and grid > 0:
        lo, hi = synth.bounding_box(world)
        gx = np.linspace(lo[0], hi[0], grid)
        gy = np.linspace(lo[1], hi[1], grid)
        xx, yy = np.meshgrid(gx, gy, indexing="xy")
        parts.append(np.column_stack([xx.ravel(), yy.ravel()]))
    if n_samples > 0:
        parts.append(synth.sample_unlabeled(world, n_samples, seed, role="ood_test").x)
    return np.concatenate(parts)


def grid_points(world: synth.WorldSpec, grid: int = 101) -> np.ndarray:
    return evaluation_points(world, 0, grid=grid, n_samples=0)


def oracle_gap(probs: np.ndarray, world: synth.WorldSpec, X, t: int | str = "BASE") -> float:
    """Mean L1 distance between predicted distributions and the oracle at ``X``.

    ``t="BASE"`` (or 0) compares with the base-objective optimum, an integer
    with the iterate at that step, ``"LIMIT"`` with the limit classifier.
    """
    batch = oracle_points(world, X)
    if t == "BASE":
        target = batch.base()
    elif t == "LIMIT":
        target = batch.limit()
    else:
        target = batch.closed(int(t))
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != target.shape:
        raise ValueError("predictions and oracle shapes differ")
    return float(np.abs(probs - target).sum(axis=1).mean())


def model_gap(model, temperature: float, world, X, t="BASE") -> float:
    from .model import predict_proba

    return oracle_gap(predict_proba(model, X, temperature), world, X, t)


def random_points(n: int, K: int, seed: int) -> OracleBatch:
    """Random oracle inputs; a slice has p_in = 0 to exercise the convention."""
    g = rng(seed, "oracle-points")
    pin = g.exponential(size=n)
    pall = g.exponential(size=n)
    pin[g.random(n) < 0.1] = 0.0
    post = g.dirichlet(np.full(K, 0.7), size=n)
    post[pin == 0] = 1.0 / K
    return OracleBatch(pin, pall, post)
