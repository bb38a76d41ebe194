"""Synthetic open world: Gaussian-mixture in-distribution plus a broad pool mixture.

Component indices are global: ``0..K-1`` are the in-distribution classes and
``K..M-1`` the unrelated components. ``p_all`` is
``pi_in * p_in + (1 - pi_in) * p_out``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import Dataset, rng

CHUNK = 1 << 16
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ComponentSpec:
    """One Gaussian. ``cov`` is a length-d diagonal or a full d x d matrix."""

    mean: np.ndarray
    cov: np.ndarray
    weight: float = 1.0
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        d = mean.shape[0]
        if cov.ndim == 1:
            if cov.shape != (d,) or np.any(cov <= 0):
                raise ValueError("diagonal covariance must be positive with length d")
            full = np.diag(cov)
        elif cov.shape == (d, d):
            if not np.allclose(cov, cov.T):
                raise ValueError("covariance must be symmetric")
            full = cov
        else:
            raise ValueError("covariance shape does not match mean")
        try:
            chol = np.linalg.cholesky(full)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        if not self.weight > 0:
            raise ValueError("component weight must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def log_pdf(self, X: np.ndarray) -> np.ndarray:
        diff = X - self.mean
        sol = np.linalg.solve(self._chol, diff.T).T if self.cov.ndim == 2 else diff / np.sqrt(self.cov)
        log_det = 2.0 * np.log(np.diag(self._chol)).sum()
        return -0.5 * (np.einsum("ij,ij->i", sol, sol) + self.d * _LOG_2PI + log_det)

    def sample(self, gen: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + gen.standard_normal((n, self.d)) @ self._chol.T

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(), "weight": float(self.weight)}


@dataclass(frozen=True)
class WorldSpec:
    in_components: tuple
    out_components: tuple
    pi_in: float
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "in_components", tuple(self.in_components))
        object.__setattr__(self, "out_components", tuple(self.out_components))
        if len(self.in_components) < 2:
            raise ValueError("need at least two in-distribution classes")
        if not self.out_components:
            raise ValueError("need at least one out-distribution component (M > K)")
        if not 0.0 < self.pi_in < 1.0:
            raise ValueError("pi_in must lie in (0, 1)")
        dims = {c.d for c in self.in_components + self.out_components}
        if len(dims) != 1:
            raise ValueError("all components must share one dimension")

    @property
    def d(self) -> int:
        return self.in_components[0].d

    @property
    def K(self) -> int:
        return len(self.in_components)

    @property
    def M(self) -> int:
        return self.K + len(self.out_components)

    @property
    def in_weights(self) -> np.ndarray:
        w = np.array([c.weight for c in self.in_components])
        return w / w.sum()

    @property
    def out_weights(self) -> np.ndarray:
        w = np.array([c.weight for c in self.out_components])
        return w / w.sum()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pi_in": float(self.pi_in),
            "in_components": [c.to_dict() for c in self.in_components],
            "out_components": [c.to_dict() for c in self.out_components],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorldSpec":
        if "preset" in data:
            opts = {k: v for k, v in data.items() if k != "preset"}
            return preset(data["preset"], **opts)
        comps = lambda key: [ComponentSpec(np.array(c["mean"]), np.array(c["cov"]), c.get("weight", 1.0))
                             for c in data[key]]
        return cls(comps("in_components"), comps("out_components"), float(data["pi_in"]),
                   data.get("name", "custom"))


def default_ring(pi_in: float = 0.05, M: int = 64, class_radius: float = 1.5, class_std: float = 0.45,
                 inner_radius: float = 2.6, inner_std: float = 0.4, outer_radius: float = 4.2,
                 outer_std: float = 0.6) -> WorldSpec:
    """d=2, K=4 classes near the origin; unrelated components on two rings.

    The inner ring overlaps the class region so some unrelated samples are
    genuinely confusable; the outer ring is clearly separated.
    """
    K = 4
    ang = np.pi / 4 + np.arange(K) * np.pi / 2
    in_c = [ComponentSpec(class_radius * np.array([np.cos(a), np.sin(a)]), np.full(2, class_std**2)) for a in ang]
    n_out = M - K
    n_inner = n_out // 5
    n_outer = n_out - n_inner
    out_c = []
    for j in range(n_inner):
        a = 2 * np.pi * j / n_inner
        out_c.append(ComponentSpec(inner_radius * np.array([np.cos(a), np.sin(a)]), np.full(2, inner_std**2)))
    for j in range(n_outer):
        a = 2 * np.pi * (j + 0.5) / n_outer
        out_c.append(ComponentSpec(outer_radius * np.array([np.cos(a), np.sin(a)]), np.full(2, outer_std**2)))
    return WorldSpec(in_c, out_c, pi_in, name="default_ring")


PRESETS = {"default_ring": default_ring}


def preset(name: str, **opts) -> WorldSpec:
    try:
        return PRESETS[name](**opts)
    except KeyError:
        raise ValueError(f"unknown world preset {name!r}") from None


def shifted(world: WorldSpec, factor: float = 2.0) -> WorldSpec:
    """Copy with unrelated components pushed radially outward ("far" OOD set)."""
    out = [ComponentSpec(c.mean * factor, c.cov, c.weight) for c in world.out_components]
    return WorldSpec(world.in_components, out, world.pi_in, name=world.name + "_far")


# -- sampling -------------------------------------------------------------------

def _draw(comps, weights, n, seed, keys):
    """Sample ``n`` points; chunk ``i`` uses its own substream."""
    X = np.empty((n, comps[0].d))
    which = np.empty(n, dtype=np.int64)
    for i, start in enumerate(range(0, n, CHUNK)):
        stop = min(n, start + CHUNK)
        gen = rng(seed, *keys, i)
        idx = gen.choice(len(comps), size=stop - start, p=weights)
        eps = gen.standard_normal((stop - start, comps[0].d))
        for j in np.unique(idx):
            rows = np.nonzero(idx == j)[0]
            X[start + rows] = comps[j].mean + eps[rows] @ comps[j]._chol.T
        which[start:stop] = idx
    return X, which


def _check_count(n):
    if int(n) <= 0:
        raise ValueError("sample count must be positive")


def sample_labeled(world: WorldSpec, n: int, seed: int, role: str = "train") -> Dataset:
    _check_count(n)
    X, y = _draw(world.in_components, world.in_weights, int(n), seed, ("labeled", role))
    return Dataset(role, X, world.K, y)


def sample_unlabeled(world: WorldSpec, m: int, seed: int, role: str = "unlabeled") -> Dataset:
    _check_count(m)
    comps = world.in_components + world.out_components
    weights = np.concatenate([world.pi_in * world.in_weights, (1 - world.pi_in) * world.out_weights])
    X, prov = _draw(comps, weights, int(m), seed, ("unlabeled", role))
    return Dataset(role, X, world.K, None, prov, prov < world.K)


def sample_out(world: WorldSpec, n: int, seed: int, role: str = "ood_val") -> Dataset:
    """Draw only from the unrelated components."""
    _check_count(n)
    X, which = _draw(world.out_components, world.out_weights, int(n), seed, ("out", role))
    prov = which + world.K
    return Dataset(role, X, world.K, None, prov, np.zeros(len(prov), dtype=bool))


def make_validation_sets(world: WorldSpec, n_in: int, n_ood: int, seed: int):
    return sample_labeled(world, n_in, seed, "in_val"), sample_out(world, n_ood, seed, "ood_val")


# -- exact densities ----------------------------------------------------------------

def _as_points(world, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != world.d:
        raise ValueError(f"expected points of dimension {world.d}, got {X.shape[1]}")
    return X


def class_log_joint(world: WorldSpec, X) -> np.ndarray:
    """``log(w_k * N_k(x))`` for each in-distribution class, shape (n, K)."""
    X = _as_points(world, X)
    return np.stack([np.log(w) + c.log_pdf(X) for c, w in zip(world.in_components, world.in_weights)], axis=1)


def log_density_in(world, X) -> np.ndarray:
    return logsumexp(class_log_joint(world, X), axis=1)


def log_density_out(world, X) -> np.ndarray:
    X = _as_points(world, X)
    terms = np.stack([np.log(w) + c.log_pdf(X) for c, w in zip(world.out_components, world.out_weights)], axis=1)
    return logsumexp(terms, axis=1)


def log_density_all(world, X) -> np.ndarray:
    return np.logaddexp(np.log(world.pi_in) + log_density_in(world, X),
                        np.log1p(-world.pi_in) + log_density_out(world, X))


def density_in(world, X) -> np.ndarray:
    return np.exp(log_density_in(world, X))


def density_out(world, X) -> np.ndarray:
    return np.exp(log_density_out(world, X))


def density_all(world, X) -> np.ndarray:
    return np.exp(log_density_all(world, X))


def posterior_in(world, X) -> np.ndarray:
    """Class posterior under p_in; uniform wherever p_in(x) underflows to zero."""
    lj = class_log_joint(world, X)
    lse = logsumexp(lj, axis=1, keepdims=True)
    post = np.exp(lj - lse)
    post[np.exp(lse[:, 0]) == 0.0] = 1.0 / world.K
    return post


def bounding_box(world: WorldSpec, n_std: float = 3.0):
    lo = np.full(world.d, np.inf)
    hi = np.full(world.d, -np.inf)
    for c in world.in_components + world.out_components:
        sd = np.sqrt(c.cov if c.cov.ndim == 1 else np.diag(c.cov))
        lo = np.minimum(lo, c.mean - n_std * sd)
        hi = np.maximum(hi, c.mean + n_std * sd)
    return lo, hi
