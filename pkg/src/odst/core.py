"""Shared types: probability vectors, dataset containers, seeded randomness.

Probability vectors are plain float64 numpy arrays of shape ``(K,)`` or, for
batches, ``(n, K)``. The helpers here validate and manipulate them.
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

SIMPLEX_TOL = 1e-9

ROLES = ("train", "in_val", "ood_val", "test", "unlabeled", "ood_test")
LABELED_ROLES = frozenset({"train", "in_val", "test"})

DATASET_MAGIC = b"ODST"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIBQII")
_UNKNOWN_PROVENANCE = 0xFFFFFFFF
_UNKNOWN_FLAG = 255


class InvariantError(ValueError):
    """A value violated a domain invariant (simplex, temperature range, ...)."""


class ProvenanceError(RuntimeError):
    """Raised when hidden ground truth is requested from a blinded dataset."""


def validate_prob(p, tol: float = SIMPLEX_TOL) -> bool:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 2 or not np.all(np.isfinite(p)):
        return False
    if np.any(p < -tol) or np.any(p > 1 + tol):
        return False
    return bool(np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol))


def check_prob(p, name: str = "p") -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if not validate_prob(arr):
        raise InvariantError(f"{name} is not a valid probability vector")
    return arr


def uniform(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


def one_hot(y: int, K: int) -> np.ndarray:
    if K < 2:
        raise ValueError("K must be at least 2")
    if not 0 <= y < K:
        raise IndexError(f"class index {y} out of range for K={K}")
    out = np.zeros(K)
    out[y] = 1.0
    return out


def one_hot_batch(y, K: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= K):
        raise IndexError(f"class index out of range for K={K}")
    out = np.zeros((y.shape[0], K))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def mix_with_uniform(p, w: float) -> np.ndarray:
    """Return ``w / K + (1 - w) * p``; works row-wise on batches."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"mixing weight {w} outside [0, 1]")
    p = check_prob(p)
    K = p.shape[-1]
    return w * (1.0 / K) + (1.0 - w) * p


def entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


# -- randomness ---------------------------------------------------------------

def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


def rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    Every stage of a run derives its own stream this way, so results do not
    depend on how many draws earlier stages made (needed for resume).
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    entropy_words = [int(seed) & 0xFFFFFFFF, int(seed) >> 32]
    entropy_words += [_key(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy_words)))


# -- datasets -----------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Ordered sample container.

    Labeled roles carry ``y``. Unlabeled roles may carry hidden ``provenance``
    (generating component) and ``in_dist`` flags; training code should get a
    :meth:`blind` copy so those are unreachable.
    """

    role: str
    x: np.ndarray
    K: int
    y: np.ndarray | None = None
    _provenance: np.ndarray | None = None
    _in_dist: np.ndarray | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("features must be a 2-d array")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        n = x.shape[0]
        if self.role in LABELED_ROLES:
            if self.y is None:
                raise ValueError(f"role {self.role} requires labels")
            y = np.asarray(self.y, dtype=np.int64)
            if y.shape != (n,) or (n and (y.min() < 0 or y.max() >= self.K)):
                raise ValueError("labels must be class indices in [0, K)")
            y.setflags(write=False)
            object.__setattr__(self, "y", y)
        for name in ("_provenance", "_in_dist"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.int64 if name == "_provenance" else bool)
                if v.shape != (n,):
                    raise ValueError(f"{name[1:]} must have one entry per sample")
                v.setflags(write=False)
                object.__setattr__(self, name, v)
        if self.role == "ood_val" and self._in_dist is not None and self._in_dist.any():
            raise InvariantError("ood_val may not contain in-distribution samples")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def is_blind(self) -> bool:
        return self._provenance is None

    @property
    def provenance(self) -> np.ndarray:
        if self._provenance is None:
            raise ProvenanceError(f"{self.role} dataset is blinded")
        return self._provenance

    @property
    def in_dist(self) -> np.ndarray:
        if self._in_dist is None:
            raise ProvenanceError(f"{self.role} dataset is blinded")
        return self._in_dist

    def blind(self) -> "Dataset":
        return replace(self, _provenance=None, _in_dist=None)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.role, self.x[idx], self.K, pick(self.y),
                       pick(self._provenance), pick(self._in_dist))

    # binary container ------------------------------------------------------

    def _record_dtype(self) -> np.dtype:
        fields = [("x", "<f8", (self.d,))]
        if self.role in LABELED_ROLES:
            fields.append(("y", "<u4"))
        else:
            fields += [("prov", "<u4"), ("flag", "u1")]
        return np.dtype(fields)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ROLES.index(self.role),
                               len(self), self.d, self.K))
        rec = np.zeros(len(self), dtype=self._record_dtype())
        rec["x"] = self.x
        if self.role in LABELED_ROLES:
            rec["y"] = self.y
        else:
            if self._provenance is None:
                rec["prov"] = _UNKNOWN_PROVENANCE
                rec["flag"] = _UNKNOWN_FLAG
            else:
                rec["prov"] = self._provenance
                rec["flag"] = self._in_dist
        buf.write(rec.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        if len(data) < _HEADER.size:
            raise ValueError("truncated dataset header")
        magic, version, role_id, count, d, K = _HEADER.unpack_from(data)
        if magic != DATASET_MAGIC:
            raise ValueError("not an ODST dataset file")
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        role = ROLES[role_id]
        probe = cls(role, np.zeros((0, d)), K, np.zeros(0, dtype=np.int64) if role in LABELED_ROLES else None)
        rec = np.frombuffer(data, dtype=probe._record_dtype(), count=count, offset=_HEADER.size)
        x = rec["x"].reshape(count, d)
        if role in LABELED_ROLES:
            return cls(role, x, K, rec["y"].astype(np.int64))
        if count and rec["flag"][0] == _UNKNOWN_FLAG:
            return cls(role, x, K)
        return cls(role, x, K, None, rec["prov"].astype(np.int64), rec["flag"].astype(bool))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# -- threading ------------------------------------------------------------------

THREADS_ENV = "ODST_THREADS"
ROW_CHUNK = 8192


def n_workers() -> int:
    """Worker count from ``$ODST_THREADS`` (default 1)."""
    n = os.environ.get(THREADS_ENV, "").strip()
    if not n:
        return 1
    if int(n) < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer")
    return int(n)


def blas_single_thread():
    """Pin BLAS to one thread so reductions never depend on the thread count."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def map_row_chunks(fn, X, chunk: int = ROW_CHUNK) -> np.ndarray:
    """Apply ``fn`` to fixed row chunks of ``X`` on ``n_workers()`` threads.

    Chunk boundaries do not depend on the worker count, so the result is
    bit-identical for any number of threads.
    """
    X = np.asarray(X)
    parts = [X[i:i + chunk] for i in range(0, X.shape[0], chunk)] or [X]
    workers = min(n_workers(), len(parts))
    if workers == 1:
        return np.concatenate([fn(p) for p in parts])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.concatenate(list(pool.map(fn, parts)))
