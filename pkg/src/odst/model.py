"""Numpy MLP classifier with soft-target cross-entropy and hand-written backprop.

Training objectives
-------------------
Two-stream modes (BASE_OE, ODST, the ablations, NON_ITERATIVE) draw a batch
from the labeled stream (T, or T plus selected pseudo-labeled samples) and an
equally sized batch from the rest of the unlabeled pool, and minimise
``mean_CE(first batch) + mean_CE(second batch)``. Single-stream modes
(BASE_CE, ST, ST_OT) minimise a weighted mean CE over one batch, labeled
samples with weight 1 and pseudo-labeled ones with weight ``lam``.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import Dataset, check_prob, one_hot_batch, rng, uniform

log = logging.getLogger(__name__)

MODEL_MAGIC = b"ODSTMODL"
MODEL_VERSION = 1


class Mode(str, enum.Enum):
    BASE_OE = "BASE_OE"
    BASE_CE = "BASE_CE"
    ODST = "ODST"
    ST = "ST"
    ST_OT = "ST_OT"
    ABLATE_HARD_U = "ABLATE_HARD_U"
    ABLATE_NO_SMOOTH = "ABLATE_NO_SMOOTH"
    NON_ITERATIVE = "NON_ITERATIVE"

    @property
    def two_stream(self) -> bool:
        return self not in (Mode.BASE_CE, Mode.ST, Mode.ST_OT)

    @property
    def base_mode(self) -> "Mode":
        """Objective used for the initial teacher of a self-training run."""
        return Mode.BASE_CE if self in (Mode.ST, Mode.ST_OT) else Mode.BASE_OE


STUDENT_MODES = frozenset(Mode) - {Mode.BASE_OE, Mode.BASE_CE}


@dataclass
class ClassifierModel:
    sizes: list
    weights: list  # each (out, in)
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output layer sizes")
        if self.sizes[-1] < 2:
            raise ValueError("output width K must be at least 2")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.sizes[i + 1], self.sizes[i]) or b.shape != (self.sizes[i + 1],):
                raise ValueError(f"layer {i} parameter shapes do not match sizes {self.sizes}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def K(self) -> int:
        return self.sizes[-1]

    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(list(self.sizes), [W.copy() for W in self.weights],
                               [b.copy() for b in self.biases], self.activation)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for p in self.params:
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()

    # checkpoint ------------------------------------------------------------

    def to_bytes(self) -> bytes:
        head = MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(self.sizes))
        head += struct.pack(f"<{len(self.sizes)}I", *self.sizes)
        return head + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClassifierModel":
        if data[:8] != MODEL_MAGIC:
            raise ValueError("not an ODST model checkpoint")
        version, n = struct.unpack_from("<II", data, 8)
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        sizes = list(struct.unpack_from(f"<{n}I", data, 16))
        model = init_model(sizes, scheme="zeros")
        vec = np.frombuffer(data, dtype="<f8", offset=16 + 4 * n)
        if vec.size != model.flat().size:
            raise ValueError("checkpoint parameter block has the wrong length")
        model.set_flat(vec.astype(np.float64))
        return model

    def save(self, path, temperature: float | None = None) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        if temperature is not None:
            Path(str(path) + ".calib.json").write_text(json.dumps({"temperature": temperature}))

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        return cls.from_bytes(Path(path).read_bytes())


def load_temperature(path) -> float | None:
    side = Path(str(path) + ".calib.json")
    if not side.exists():
        return None
    return float(json.loads(side.read_text())["temperature"])


def init_model(sizes: Sequence[int], seed: int = 0, scheme: str = "glorot") -> ClassifierModel:
    sizes = [int(s) for s in sizes]
    gen = rng(seed, "init")
    Ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if scheme == "zeros":
            W = np.zeros((fan_out, fan_in))
        elif scheme == "glorot":
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            W = gen.uniform(-lim, lim, size=(fan_out, fan_in))
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        Ws.append(W)
        bs.append(np.zeros(fan_out))
    return ClassifierModel(sizes, Ws, bs)


# -- forward / losses ------------------------------------------------------------

def _check_input(model, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.sizes[0]:
        raise ValueError(f"input dimension {X.shape[1]} does not match model input {model.sizes[0]}")
    return X, single


def _forward_cache(model, X):
    acts = [X]
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return acts


def forward(model: ClassifierModel, X) -> np.ndarray:
    X, single = _check_input(model, X)
    logits = _forward_cache(model, X)[-1]
    return logits[0] if single else logits


def log_softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(logits)):
        raise FloatingPointError("NaN in logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(logits)):
        raise FloatingPointError("NaN in logits")
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ce_soft(target, logits) -> np.ndarray:
    """Per-sample ``-sum_i target_i log softmax(logits)_i``."""
    target = check_prob(target, "target")
    return -(target * log_softmax(logits)).sum(axis=-1)


def predict_proba(model, X, temperature: float = 1.0) -> np.ndarray:
    return softmax(forward(model, X) / temperature)


# -- gradients ------------------------------------------------------------------

def loss_and_grad(model: ClassifierModel, X, targets, weights=None):
    """Weighted CE ``sum_i w_i CE_i`` and its gradient; default ``w_i = 1/n``."""
    X, _ = _check_input(model, X)
    targets = np.atleast_2d(targets)
    n = X.shape[0]
    if targets.shape != (n, model.K):
        raise ValueError(f"targets must have shape {(n, model.K)}")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    acts = _forward_cache(model, X)
    logits = acts[-1]
    logp = log_softmax(logits)
    loss = float(w @ -(targets * logp).sum(axis=1))
    delta = (np.exp(logp) - targets) * w[:, None]
    grads_W, grads_b = [], []
    for i in range(len(model.weights) - 1, -1, -1):
        grads_W.append(delta.T @ acts[i])
        grads_b.append(delta.sum(axis=0))
        if i > 0:
            delta = (delta @ model.weights[i]) * (1.0 - acts[i] ** 2)
    grads_W.reverse()
    grads_b.reverse()
    grads = []
    for gW, gb in zip(grads_W, grads_b):
        grads += [gW, gb]
    return loss, grads


def backward(model: ClassifierModel, X, targets) -> list:
    """Gradient of the mean soft-target CE over the batch, ordered like ``model.params``."""
    return loss_and_grad(model, X, targets)[1]


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_params: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _loss_extended(params, X, targets) -> np.longdouble:
    """Mean soft-target CE evaluated in extended precision."""
    h = X
    for i in range(0, len(params), 2):
        h = h @ params[i].T + params[i + 1]
        if i + 2 < len(params):
            h = np.tanh(h)
    h = h - h.max(axis=1, keepdims=True)
    logp = h - np.log(np.exp(h).sum(axis=1, keepdims=True))
    return -(targets * logp).sum(axis=1).mean()


def grad_check(model, X, targets, step: float = 1e-6, tolerance: float = 1e-5,
               grads: list | None = None, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients (or ``grads`` if given) with central differences.

    The difference quotients are evaluated in extended precision so that
    rounding in the loss does not swamp small gradient entries. Relative
    error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if grads is None:
        grads = backward(model, X, targets)
    X, _ = _check_input(model, X)
    analytic = np.concatenate([g.ravel() for g in grads])
    ext = np.longdouble
    params = [p.astype(ext) for p in model.params]
    Xe, Te = X.astype(ext), np.atleast_2d(targets).astype(ext)
    numeric = np.empty(analytic.size)
    h = ext(step)
    k = 0
    for p in params:
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _loss_extended(params, Xe, Te)
            flat[i] = orig - h
            down = _loss_extended(params, Xe, Te)
            flat[i] = orig
            numeric[k] = float((up - down) / (2 * h))
            k += 1
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(float(rel.max()) if rel.size else 0.0, tolerance, analytic.size)


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    decay_epochs: tuple = (80, 120, 160)
    decay_factor: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    lam: float = 1.0
    mode: Mode = Mode.ODST
    seed: int = 0
    hidden: tuple = (64, 64)
    warm_start: bool = False
    select_frac: float = 0.2

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not 0 < self.select_frac <= 1:
            raise ValueError("select_frac must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** sum(epoch >= e for e in self.decay_epochs)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["mode"] = self.mode.value
        d["decay_epochs"] = list(self.decay_epochs)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class StepInfo:
    """Passed to the training callback before each parameter update."""

    epoch: int
    step: int
    first_idx: np.ndarray
    second_idx: np.ndarray | None
    loss: float
    model: ClassifierModel


class ConfigError(ValueError):
    pass


def _stream_order(seed, tag, n, cycle):
    return rng(seed, "stream", tag, cycle).permutation(n)


def _error(model, data: Dataset) -> float:
    return float(np.mean(forward(model, data.x).argmax(axis=1) != data.y))


def fit(first_x, first_t, first_w, cfg: TrainConfig, second_x=None, second_t=None,
        in_val: Dataset | None = None, init: ClassifierModel | None = None,
        callback: Callable[[StepInfo], None] | None = None) -> ClassifierModel:
    """Mini-batch Nesterov SGD over one or two streams.

    ``first_w`` are per-sample loss weights in the first stream (1 for labeled
    data, ``lam`` for pseudo-labeled data in single-stream modes). An epoch is
    one pass over the first stream. With ``in_val`` given, the parameters with
    lowest validation error over the last ``select_frac`` of epochs are
    returned (earliest on ties).
    """
    n1 = first_x.shape[0]
    d = first_x.shape[1]
    K = first_t.shape[1]
    model = init.copy() if init is not None else init_model([d, *cfg.hidden, K], cfg.seed)
    velocity = [np.zeros_like(p) for p in model.params]
    two = second_x is not None and second_x.shape[0] > 0
    n2 = second_x.shape[0] if two else 0
    cursor, cycle = 0, 0
    order2 = _stream_order(cfg.seed, "second", n2, cycle) if two else None
    first_select = cfg.epochs - max(1, math.ceil(cfg.select_frac * cfg.epochs))
    best, best_err = None, math.inf
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order1 = _stream_order(cfg.seed, "first", n1, epoch)
        for start in range(0, n1, cfg.batch_size):
            idx1 = order1[start:start + cfg.batch_size]
            b = idx1.size
            w1 = first_w[idx1]
            if two:
                take = []
                while len(take) < b:
                    need = b - len(take)
                    chunk = order2[cursor:cursor + need]
                    take.extend(chunk.tolist())
                    cursor += chunk.size
                    if cursor >= n2:
                        cycle += 1
                        cursor = 0
                        order2 = _stream_order(cfg.seed, "second", n2, cycle)
                idx2 = np.asarray(take, dtype=np.int64)
                X = np.concatenate([first_x[idx1], second_x[idx2]])
                T = np.concatenate([first_t[idx1], second_t[idx2]])
                w = np.concatenate([w1 / b, np.full(b, 1.0 / b)])
            else:
                idx2 = None
                X, T, w = first_x[idx1], first_t[idx1], w1 / b
            loss, grads = loss_and_grad(model, X, T, w)
            if callback is not None:
                callback(StepInfo(epoch, step, idx1, idx2, loss, model))
            for p, g, v in zip(model.params, grads, velocity):
                g = g + cfg.weight_decay * p
                v *= cfg.momentum
                v += g
                p -= lr * (g + cfg.momentum * v if cfg.nesterov else v)
            step += 1
        if not model.is_finite():
            raise FloatingPointError(f"non-finite parameters after epoch {epoch}")
        if in_val is not None and epoch >= first_select:
            err = _error(model, in_val)
            if err < best_err:
                best, best_err = model.copy(), err
    return best if best is not None else model


def train_base(T: Dataset, U: Dataset | None, cfg: TrainConfig, in_val: Dataset | None = None,
               callback=None) -> ClassifierModel:
    """Initial teacher: CE on T, plus (BASE_OE) uniform-target CE on U."""
    if cfg.mode not in (Mode.BASE_OE, Mode.BASE_CE):
        raise ConfigError(f"train_base needs BASE_OE or BASE_CE, got {cfg.mode.value}")
    if len(T) == 0:
        raise ConfigError("labeled set is empty")
    first_t = one_hot_batch(T.y, T.K)
    ones = np.ones(len(T))
    if cfg.mode is Mode.BASE_CE:
        return fit(T.x, first_t, ones, cfg, in_val=in_val, callback=callback)
    if U is None or len(U) == 0:
        raise ConfigError("BASE_OE requires a non-empty unlabeled set")
    second_t = np.broadcast_to(uniform(T.K), (len(U), T.K))
    return fit(T.x, first_t, ones, cfg, U.x, second_t, in_val=in_val, callback=callback)


def train_student(T: Dataset, I_x, I_q, rest_x, rest_v, cfg: TrainConfig,
                  in_val: Dataset | None = None, init: ClassifierModel | None = None,
                  callback=None) -> ClassifierModel:
    """Student objective on labeled data, selected samples ``(I_x, I_q)`` and the rest ``(rest_x, rest_v)``.

    ``I_x`` may contain repeated rows (class-balancing repetitions). ``rest_*``
    is ignored in ST / ST_OT.
    """
    if cfg.mode not in STUDENT_MODES:
        raise ConfigError(f"train_student does not accept mode {cfg.mode.value}")
    I_x = np.asarray(I_x, dtype=np.float64).reshape(-1, T.d)
    I_q = np.asarray(I_q, dtype=np.float64).reshape(-1, T.K)
    if I_x.shape[0] == 0:
        log.warning("no pseudo-labeled samples selected; training on labeled data%s only",
                    "" if not cfg.mode.two_stream else " and the unlabeled damping term")
    first_x = np.concatenate([T.x, I_x])
    first_t = np.concatenate([one_hot_batch(T.y, T.K), I_q])
    if cfg.mode.two_stream:
        first_w = np.ones(first_x.shape[0])
        start = init if cfg.warm_start else None
        return fit(first_x, first_t, first_w, cfg, np.asarray(rest_x), np.asarray(rest_v),
                   in_val=in_val, init=start, callback=callback)
    first_w = np.concatenate([np.ones(len(T)), np.full(I_x.shape[0], cfg.lam)])
    return fit(first_x, first_t, first_w, cfg, in_val=in_val,
               init=init if cfg.warm_start else None, callback=callback)


def with_mode(cfg: TrainConfig, mode: Mode, seed: int | None = None) -> TrainConfig:
    return replace(cfg, mode=Mode(mode), seed=cfg.seed if seed is None else seed)
