"""The iterative self-training loop: calibrate, pseudo-label, select, relabel, retrain."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import synth
from .calib import Calibration, ece, fit_temperature
from .core import Dataset, blas_single_thread, map_row_chunks, rng
from .metrics import (IterationReport, auroc, label_accuracy, reports_from_csv, selection_precision,
                      selection_recall, test_error)
from .model import ClassifierModel, Mode, TrainConfig, forward, softmax, train_base, train_student
from .report import emit_report, selection_rows
from .select import (SelectionResult, assign_pseudo_labels, compute_thresholds, k_schedule,
                     pseudo_label_pool, select_topk)

log = logging.getLogger(__name__)

class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    world: dict = field(default_factory=lambda: {"preset": "default_ring"})
    n: int = 400
    m: int = 200_000
    n_in_val: int = 2000
    n_ood_val: int = 5000
    n_test: int = 20_000
    n_ood_test: int = 20_000
    alpha: float = 0.98
    iterations: int = 3
    mode: Mode = Mode.ODST
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    data_seed: int | None = None
    out: str | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("n", "m", "n_in_val", "n_ood_val", "n_test", "n_ood_test"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mode in (Mode.BASE_OE, Mode.BASE_CE):
            raise ValueError("experiment mode must be a self-training mode")

    @property
    def world_spec(self) -> synth.WorldSpec:
        return synth.WorldSpec.from_dict(self.world)

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["mode"] = self.mode.value
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        sel = data.pop("selection", None)
        if sel:
            data["alpha"] = sel.get("alpha", data.get("alpha", 0.98))
        dat = data.pop("data", None)
        if dat:
            data.update(dat)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass
class DataBundle:
    train: Dataset
    pool: Dataset
    in_val: Dataset
    ood_val: Dataset
    test: Dataset
    ood_test: Dataset

    def checksums(self) -> dict:
        return {k: getattr(self, k).checksum() for k in self.__dataclass_fields__}


def generate_data(cfg: ExperimentConfig) -> DataBundle:
    world = cfg.world_spec
    s = cfg.effective_data_seed
    in_val, ood_val = synth.make_validation_sets(world, cfg.n_in_val, cfg.n_ood_val, s)
    return DataBundle(
        train=synth.sample_labeled(world, cfg.n, s, "train"),
        pool=synth.sample_unlabeled(world, cfg.m, s),
        in_val=in_val,
        ood_val=ood_val,
        test=synth.sample_labeled(world, cfg.n_test, s, "test"),
        ood_test=synth.sample_out(world, cfg.n_ood_test, s, "ood_test"),
    )


@dataclass
class ExperimentState:
    t: int
    teacher: ClassifierModel
    calibration: Calibration | None = None
    selection: SelectionResult | None = None
    history: list = field(default_factory=list)
    selection_table: list = field(default_factory=list)
    # largest smoothed label over U minus I, per round (in memory only)
    rest_label_max: list = field(default_factory=list)


def thread_limit():
    """Single-threaded BLAS; ``$ODST_THREADS`` only sets the row-chunk worker pool."""
    return blas_single_thread()


def _train_seed(seed: int, t: int) -> int:
    return int(rng(seed, "train", t).integers(0, 2**63))


def evaluate(model: ClassifierModel, data: DataBundle, t: int):
    """Calibrate on in_val and compute the metrics row for the teacher at iteration t."""
    logits = lambda X: map_row_chunks(lambda c: forward(model, c), X)
    val_logits = logits(data.in_val.x)
    cal = fit_temperature(val_logits, data.in_val.y)
    T = cal.temperature
    test_p = softmax(logits(data.test.x) / T)
    ood_p = softmax(logits(data.ood_test.x) / T)
    report = IterationReport(
        iteration=t,
        test_error=test_error(test_p, data.test.y),
        auroc=auroc(test_p.max(axis=1), ood_p.max(axis=1)),
        ece_before=ece(softmax(val_logits), data.in_val.y),
        ece_after=ece(softmax(val_logits / T), data.in_val.y),
        temperature=T,
    )
    return cal, report


def select_step(cfg: ExperimentConfig, teacher, cal, data: DataBundle, t: int, k_iter: int):
    """Pseudo-label the blinded pool and select from it; returns training arrays too."""
    pool = data.pool.blind()
    ann = pseudo_label_pool(teacher, cal, pool.x)
    in_p = pseudo_label_pool(teacher, cal, data.in_val.x).probs
    ood_p = pseudo_label_pool(teacher, cal, data.ood_val.x).probs
    th = compute_thresholds(in_p, data.in_val.y, ood_p, cfg.alpha, cfg.mode)
    k = k_schedule(cfg.n, pool.K, k_iter)
    sel = select_topk(ann, th.final, k, int(rng(cfg.seed, "select", t).integers(0, 2**63)), th)
    q, rest_idx, v = assign_pseudo_labels(ann, sel, cfg.mode)
    return ann, sel, q, rest_idx, v


def _state_dir(out) -> Path:
    return Path(out) / "state"


def save_state(state: ExperimentState, out) -> None:
    d = _state_dir(out)
    d.mkdir(parents=True, exist_ok=True)
    state.teacher.save(d / "teacher.bin")
    from .metrics import reports_to_csv
    from .report import selection_csv

    (d / "history.csv").write_text(reports_to_csv(state.history))
    (d / "selection.csv").write_text(selection_csv(state.selection_table))
    (d / "state.json").write_text(json.dumps({"t": state.t}))


def load_state(out) -> ExperimentState | None:
    d = _state_dir(out)
    if not (d / "state.json").exists():
        return None
    t = json.loads((d / "state.json").read_text())["t"]
    history = reports_from_csv((d / "history.csv").read_text())
    table = [row for row in csv.reader(io.StringIO((d / "selection.csv").read_text()))][1:]
    table = [[int(r[0]), int(r[1]), int(r[2]), int(r[3]), int(r[4]), r[5], r[6], r[7]] for r in table]
    return ExperimentState(t, ClassifierModel.load(d / "teacher.bin"), history=history, selection_table=table)


def _dump_selection(out: Path, t: int, sel: SelectionResult, q, pool: Dataset):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    K = q.shape[1] if q.size else pool.K
    w.writerow(["pool_index", "class", "repeats"] + [f"q{c}" for c in range(K)])
    for i, c, r, row in zip(sel.indices, sel.classes, sel.repeats, q):
        w.writerow([int(i), int(c), int(r)] + [repr(float(x)) for x in row])
    (out / f"selected_t{t}.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pool_index", "class", "provenance", "in_distribution"])
    for i, c in zip(sel.indices, sel.classes):
        w.writerow([int(i), int(c), int(pool.provenance[i]), int(pool.in_dist[i])])
    (out / f"audit_t{t}.csv").write_text(buf.getvalue())


def run_experiment(cfg: ExperimentConfig, data: DataBundle | None = None, resume: bool = False,
                   stop_after: int | None = None, write: bool = True) -> ExperimentState:
    """Run base training and ``cfg.iterations`` self-training rounds.

    One report row per teacher: row t describes model f_t and the selection it
    made. NON_ITERATIVE performs a single round whose k matches the last
    iteration. ``stop_after`` ends the run once that many rounds are done
    (used to exercise resume).
    """
    out = Path(cfg.out) if (cfg.out and write) else None
    stage = "data"
    with thread_limit():
        try:
            data = data or generate_data(cfg)
            state = load_state(out) if (resume and out is not None) else None
            if state is None:
                stage = "train-base"
                base_cfg = replace(cfg.train, mode=cfg.mode.base_mode, seed=_train_seed(cfg.seed, 0))
                teacher = train_base(data.train, data.pool.blind(), base_cfg, in_val=data.in_val)
                state = ExperimentState(0, teacher)
                if out is not None:
                    out.mkdir(parents=True, exist_ok=True)
                    save_state(state, out)
            rounds = 1 if cfg.mode is Mode.NON_ITERATIVE and cfg.iterations > 0 else cfg.iterations
            while True:
                t = state.t
                stage = f"calibrate[t={t}]"
                cal, report = evaluate(state.teacher, data, t)
                state.calibration = cal
                if t >= rounds:
                    state.history.append(report)
                    break
                stage = f"select[t={t}]"
                k_iter = cfg.iterations - 1 if cfg.mode is Mode.NON_ITERATIVE else t
                ann, sel, q, rest_idx, v = select_step(cfg, state.teacher, cal, data, t, k_iter)
                state.selection = sel
                report.accepted = tuple(int(a) for a in sel.accepted)
                report.selection_precision = selection_precision(sel.indices, data.pool)
                report.selection_recall_in_pool = selection_recall(sel.indices, data.pool)
                report.label_accuracy = label_accuracy(sel.indices, q, data.pool)
                state.history.append(report)
                state.selection_table += selection_rows(t, sel)
                state.rest_label_max.append(float(v.max()) if v.size else None)
                if out is not None:
                    _dump_selection(out, t, sel, q, data.pool)
                stage = f"train-student[t={t}]"
                reps = sel.repeats
                I_x = np.repeat(data.pool.x[sel.indices], reps, axis=0)
                I_q = np.repeat(q, reps, axis=0)
                scfg = replace(cfg.train, mode=cfg.mode, seed=_train_seed(cfg.seed, t + 1))
                student = train_student(data.train, I_x, I_q, data.pool.x[rest_idx], v, scfg,
                                        in_val=data.in_val, init=state.teacher)
                state = ExperimentState(t + 1, student, history=state.history,
                                        selection_table=state.selection_table,
                                        rest_label_max=state.rest_label_max)
                if out is not None:
                    save_state(state, out)
                if stop_after is not None and state.t >= stop_after:
                    return state
            if out is not None:
                stage = "report"
                emit_report(state.history, out, state.selection_table)
                state.teacher.save(out / "final_model.bin", state.calibration.temperature)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
    return state


@dataclass
class ComparisonRow:
    mode: str
    n_seeds: int
    test_error_mean: float
    test_error_spread: float
    auroc_mean: float
    auroc_spread: float
    base_test_error_mean: float
    selection_precision_mean: float | None


def compare_modes(cfg: ExperimentConfig, modes, seeds, write: bool = False):
    """Run every (mode, seed) cell; for each seed all modes share the same data.

    Returns ``(rows, runs, checksums)`` where ``runs[(mode, seed)]`` is the
    final state and ``checksums[(mode, seed)]`` the data checksums that cell
    consumed. Spread is the sample standard deviation (0 for one seed).
    """
    modes = [Mode(m) for m in modes]
    seeds = [int(s) for s in seeds]
    if not modes or not seeds:
        raise ValueError("need at least one mode and one seed")
    runs, sums = {}, {}
    for s in seeds:
        data_cfg = replace(cfg, seed=s, data_seed=s)
        data = generate_data(data_cfg)
        for mode in modes:
            out = None
            if write and cfg.out:
                out = str(Path(cfg.out) / f"{mode.value}_seed{s}")
            cell = replace(data_cfg, mode=mode, out=out)
            sums[(mode.value, s)] = data.checksums()
            runs[(mode.value, s)] = run_experiment(cell, data=data, write=write)
    rows = []
    for mode in modes:
        hist = [runs[(mode.value, s)].history for s in seeds]
        final = np.array([h[-1].test_error for h in hist])
        au = np.array([h[-1].auroc for h in hist])
        base = np.array([h[0].test_error for h in hist])
        prec = [r.selection_precision for h in hist for r in h if r.selection_precision is not None]
        sd = lambda a: float(a.std(ddof=1)) if a.size > 1 else 0.0
        rows.append(ComparisonRow(mode.value, len(seeds), float(final.mean()), sd(final),
                                  float(au.mean()), sd(au), float(base.mean()),
                                  float(np.mean(prec)) if prec else None))
    return rows, runs, sums


def comparison_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(ComparisonRow.__dataclass_fields__)
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if getattr(r, c) is None else (repr(getattr(r, c)) if isinstance(getattr(r, c), float)
                    else getattr(r, c)) for c in cols])
    return buf.getvalue()
