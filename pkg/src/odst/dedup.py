"""Near-duplicate removal of reference (test) images from an unlabeled corpus.

Stage 1 drops corpus items whose nearest reference lies within ``hard_radius``
(L2 on [0,1] pixels). Stage 2 collects items within ``candidate_radius``.
Stage 3 drops a candidate when it is perceptually close to its nearest
reference: ``1 - SSIM < ssim_dist_max`` and, when a perceptual metric is
plugged in, ``metric < perceptual_dist_max`` as well.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy.signal import correlate2d

IMAGES_MAGIC = b"ODSTIMGS"
_IMG_HEADER = struct.Struct("<8sQIII")


class PerceptualMetric(Protocol):
    def __call__(self, x: np.ndarray, z: np.ndarray) -> float: ...


@dataclass(frozen=True)
class ImageTensor:
    """Stack of images, shape (count, h, w, c), values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 3:
            px = px[None]
        if px.ndim != 4:
            raise ValueError("images must have shape (count, h, w, c)")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def shape(self):
        return self.pixels.shape[1:]

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(len(self), -1)

    @classmethod
    def from_uint8(cls, data) -> "ImageTensor":
        return cls(np.asarray(data, dtype=np.uint8) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.pixels * 255.0).astype(np.uint8)

    def save(self, path) -> None:
        n, h, w, c = self.pixels.shape
        Path(path).write_bytes(_IMG_HEADER.pack(IMAGES_MAGIC, n, h, w, c) + self.to_uint8().tobytes())

    @classmethod
    def load(cls, path) -> "ImageTensor":
        data = Path(path).read_bytes()
        magic, n, h, w, c = _IMG_HEADER.unpack_from(data)
        if magic != IMAGES_MAGIC:
            raise ValueError(f"{path}: not an ODST image container")
        px = np.frombuffer(data, dtype=np.uint8, count=n * h * w * c, offset=_IMG_HEADER.size)
        return cls.from_uint8(px.reshape(n, h, w, c))


@dataclass(frozen=True)
class DedupConfig:
    hard_radius: float = 3.0
    candidate_radius: float = 2000 / 255
    ssim_dist_max: float = 0.4
    perceptual_dist_max: float = 0.025
    perceptual_metric: Callable | None = None

    def __post_init__(self):
        if min(self.hard_radius, self.candidate_radius, self.ssim_dist_max, self.perceptual_dist_max) <= 0:
            raise ValueError("all dedup thresholds must be positive")
        if not self.hard_radius < self.candidate_radius:
            raise ValueError("hard_radius must be smaller than candidate_radius")


# -- exact nearest neighbour search ---------------------------------------------------

def _row_dists(a: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Exact Euclidean distances from ``a`` to every row of ``B``.

    Both search paths call this, so their reported distances agree bit for bit.
    """
    diff = B - a
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def nn_naive(corpus, refs, radius: float):
    """Reference O(n*m) scan; records ``(corpus_idx, ref_idx, dist)`` for dist < radius."""
    corpus = np.asarray(corpus, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    out = []
    for i in range(corpus.shape[0]):
        d = _row_dists(corpus[i], refs)
        j = int(np.argmin(d))
        if d[j] < radius:
            out.append((i, j, float(d[j])))
    return out


def nn_within_radius(corpus, refs, radius: float, tile: int = 2048):
    """Blocked exact nearest-reference search.

    Squared distances per tile come from ``|a|^2 + |b|^2 - 2 a.b``. Because
    that expansion is inexact, every reference whose expanded distance lies
    within a rounding margin of the tile row minimum is rescored with
    :func:`_row_dists`, and the smallest exact distance wins (lowest index on
    ties), exactly as in :func:`nn_naive`.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    refs = np.asarray(refs, dtype=np.float64)
    if refs.ndim != 2:
        raise ValueError("references must be flattened to (m, dim)")
    n_corpus = corpus.shape[0]
    if corpus.ndim != 2 or corpus.shape[1] != refs.shape[1]:
        raise ValueError("corpus and reference dimensions differ")
    ref_sq = np.einsum("ij,ij->i", refs, refs)
    out = []
    for start in range(0, n_corpus, tile):
        block = np.asarray(corpus[start:start + tile], dtype=np.float64)
        blk_sq = np.einsum("ij,ij->i", block, block)
        d2 = blk_sq[:, None] + ref_sq[None, :] - 2.0 * (block @ refs.T)
        row_min = d2.min(axis=1)
        margin = 1e-9 * (blk_sq[:, None] + ref_sq[None, :]) + 1e-9
        # cheap radius prefilter with the same margin
        hopeful = np.nonzero(row_min <= radius * radius + margin.max(axis=1))[0]
        for r in hopeful:
            cand = np.nonzero(d2[r] <= row_min[r] + 2 * margin[r])[0]
            exact = _row_dists(block[r], refs[cand])
            k = int(np.argmin(exact))
            if exact[k] < radius:
                out.append((start + int(r), int(cand[k]), float(exact[k])))
    return out


# -- SSIM ----------------------------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = gaussian_window()


def _filt(img: np.ndarray) -> np.ndarray:
    return correlate2d(img, _WINDOW, mode="valid")


def ssim(x, z, data_range: float = 1.0) -> float:
    """Mean SSIM over the valid-window map, averaged over channels.

    Uses an 11x11 Gaussian window (sigma 1.5), C1=(0.01 L)^2, C2=(0.03 L)^2.
    Images are (h, w) or (h, w, c) and must be at least 11x11.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ValueError("images differ in shape")
    if x.ndim == 2:
        x, z = x[..., None], z[..., None]
    if x.shape[0] < _WINDOW.shape[0] or x.shape[1] < _WINDOW.shape[1]:
        raise ValueError("images must be at least as large as the 11x11 window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for ch in range(x.shape[2]):
        a, b = x[..., ch], z[..., ch]
        mu_a, mu_b = _filt(a), _filt(b)
        var_a = _filt(a * a) - mu_a * mu_a
        var_b = _filt(b * b) - mu_b * mu_b
        cov = _filt(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


# -- staged removal ------------------------------------------------------------------

@dataclass(frozen=True)
class Removal:
    corpus_idx: int
    stage: int
    ref_set: int
    ref_idx: int
    l2: float
    ssim_dist: float | None = None
    perceptual_dist: float | None = None


def _nearest_over_sets(corpus_flat, ref_sets, radius):
    """Nearest reference over all sets: corpus idx -> (set, ref idx, dist)."""
    best = {}
    for s, refs in enumerate(ref_sets):
        for i, j, d in nn_within_radius(corpus_flat, refs.flat(), radius):
            if i not in best or d < best[i][2]:
                best[i] = (s, j, d)
    return best


def dedup_run(corpus: ImageTensor, ref_sets, cfg: DedupConfig = DedupConfig()):
    """Return ``(remove_mask, removals)`` where removals are in corpus order."""
    ref_sets = [ref_sets] if isinstance(ref_sets, ImageTensor) else list(ref_sets)
    for refs in ref_sets:
        if refs.shape != corpus.shape:
            raise ValueError("reference images must match corpus image shape")
    flat = corpus.flat()
    near = _nearest_over_sets(flat, ref_sets, cfg.candidate_radius)
    mask = np.zeros(len(corpus), dtype=bool)
    removals = []
    for i in sorted(near):
        s, j, d = near[i]
        if d < cfg.hard_radius:
            mask[i] = True
            removals.append(Removal(i, 1, s, j, d))
            continue
        x, z = corpus.pixels[i], ref_sets[s].pixels[j]
        sd = 1.0 - ssim(x, z)
        pd = None
        ok = sd < cfg.ssim_dist_max
        if cfg.perceptual_metric is not None:
            pd = float(cfg.perceptual_metric(x, z))
            ok = ok and pd < cfg.perceptual_dist_max
        if ok:
            mask[i] = True
            removals.append(Removal(i, 3, s, j, d, sd, pd))
    return mask, removals


def audit_csv(removals) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["corpus_idx", "stage", "ref_set", "ref_idx", "l2", "ssim_dist", "perceptual_dist"])
    for r in removals:
        w.writerow([r.corpus_idx, r.stage, r.ref_set, r.ref_idx, repr(r.l2),
                    "" if r.ssim_dist is None else repr(r.ssim_dist),
                    "" if r.perceptual_dist is None else repr(r.perceptual_dist)])
    return buf.getvalue()
