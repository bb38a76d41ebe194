"""Command-line entry point: ``odst <subcommand> [--config F] [--seed S] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from . import dedup, oracle, synth
from .calib import Calibration
from .core import Dataset
from .experiment import (ExperimentConfig, StageError, comparison_csv, compare_modes, evaluate,
                         generate_data, run_experiment, thread_limit, _train_seed)
from .metrics import reports_from_csv, reports_to_csv
from .model import ClassifierModel, load_temperature, predict_proba, train_base
from .report import emit_report

log = logging.getLogger("odst")

DATA_FILES = ("train", "pool", "in_val", "ood_val", "test", "ood_test")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _out(args, cfg=None) -> Path:
    out = Path(args.out or (cfg.out if cfg and cfg.out else "odst_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args):
    cfg = _config(args)
    out = _out(args, cfg)
    data = generate_data(cfg)
    for name in DATA_FILES:
        getattr(data, name).save(out / f"{name}.odst")
    (out / "world.yaml").write_text(yaml.safe_dump(cfg.world_spec.to_dict(), sort_keys=False))
    (out / "checksums.json").write_text(json.dumps(data.checksums(), indent=2, sort_keys=True))
    print(f"wrote {len(DATA_FILES)} datasets to {out}")


def cmd_train_base(args):
    cfg = _config(args)
    out = _out(args, cfg)
    data = generate_data(cfg)
    mode = args.mode or cfg.mode.base_mode
    tcfg = replace(cfg.train, mode=mode, seed=_train_seed(cfg.seed, 0))
    with thread_limit():
        model = train_base(data.train, data.pool.blind(), tcfg, in_val=data.in_val)
        cal, report = evaluate(model, data, 0)
    model.save(out / "base_model.bin", cal.temperature)
    (out / "base_metrics.csv").write_text(reports_to_csv([report]))
    print(f"base model ({tcfg.mode.value}) test error {report.test_error:.4f}, "
          f"AUROC {report.auroc:.4f}, T={cal.temperature:.4g}")


def cmd_iterate(args):
    cfg = _config(args)
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    cfg = replace(cfg, out=str(_out(args, cfg)))
    state = run_experiment(cfg, resume=args.resume, stop_after=args.stop_after)
    for r in state.history:
        print(f"t={r.iteration} test_error={r.test_error:.4f} auroc={r.auroc:.4f} "
              f"T={r.temperature:.4g} precision={r.selection_precision}")


def cmd_eval(args):
    cfg = _config(args)
    out = _out(args, cfg)
    model = ClassifierModel.load(args.model)
    data = generate_data(cfg)
    with thread_limit():
        cal, report = evaluate(model, data, args.iteration)
    (out / "eval.csv").write_text(reports_to_csv([report]))
    print(reports_to_csv([report]), end="")


def cmd_oracle_check(args):
    cfg = _config(args)
    out = _out(args, cfg)
    world = cfg.world_spec
    X = oracle.evaluation_points(world, cfg.seed, grid=args.grid, n_samples=args.samples)
    batch = oracle.oracle_points(world, X)
    probs = None
    if args.model:
        model = ClassifierModel.load(args.model)
        T = args.temperature if args.temperature is not None else (load_temperature(args.model) or 1.0)
        probs = predict_proba(model, X, T)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point_id", "r", "t", "max_abs_closed_minus_recursive", "model_gap"])
    r = batch.r
    worst = 0.0
    for t in range(args.t_max + 1):
        diff = np.abs(batch.closed(t) - batch.recursive(t)).max(axis=1)
        worst = max(worst, float(diff.max()))
        gap = np.abs(probs - batch.closed(t)).sum(axis=1) if probs is not None else None
        for i in range(len(batch)):
            w.writerow([i, repr(float(r[i])), t, repr(float(diff[i])),
                        "" if gap is None else repr(float(gap[i]))])
    (out / "oracle_check.csv").write_text(buf.getvalue())
    msg = f"{len(batch)} points, t<= {args.t_max}: max |closed - recursive| = {worst:.3g}"
    if probs is not None:
        msg += f"; mean model gap (t=0) = {oracle.oracle_gap(probs, world, X, 0):.4f}"
    print(msg)


def cmd_dedup(args):
    conf = dict(yaml.safe_load(Path(args.config).read_text()) or {}) if args.config else {}
    cfg = dedup.DedupConfig(**conf)
    corpus = dedup.ImageTensor.load(args.corpus)
    refs = [dedup.ImageTensor.load(p) for p in args.refs]
    with thread_limit():
        mask, removals = dedup.dedup_run(corpus, refs, cfg)
    out = Path(args.out) if args.out else None
    mask_path = Path(args.out_mask) if args.out_mask else (out / "mask.bin" if out else Path("mask.bin"))
    audit_path = Path(args.audit) if args.audit else (out / "audit.csv" if out else Path("audit.csv"))
    for p in (mask_path, audit_path):
        p.parent.mkdir(parents=True, exist_ok=True)
    mask_path.write_bytes(mask.astype(np.uint8).tobytes())
    audit_path.write_text(dedup.audit_csv(removals))
    s1 = sum(r.stage == 1 for r in removals)
    print(f"removed {int(mask.sum())} of {len(corpus)} ({s1} at stage 1, {len(removals) - s1} at stage 3)")


def cmd_compare(args):
    cfg = _config(args)
    out = _out(args, cfg)
    cfg = replace(cfg, out=str(out))
    seeds = args.seeds or [cfg.seed]
    rows, runs, sums = compare_modes(cfg, args.modes, seeds, write=True)
    (out / "comparison.csv").write_text(comparison_csv(rows))
    (out / "data_checksums.json").write_text(json.dumps(
        {f"{m}/seed{s}": v for (m, s), v in sums.items()}, indent=2, sort_keys=True))
    print(comparison_csv(rows), end="")


def cmd_report(args):
    out = Path(args.out or ".")
    src = Path(args.metrics) if args.metrics else out / "metrics.csv"
    history = reports_from_csv(src.read_text())
    table = None
    sel = src.parent / "selection.csv"
    if sel.exists():
        table = [row for row in csv.reader(io.StringIO(sel.read_text()))][1:]
    paths = emit_report(history, out, table)
    print("\n".join(str(p) for p in paths.values()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odst", description="Out-distribution aware self-training lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="experiment config (YAML)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.set_defaults(fn=fn, stage=name)
        return sp

    add("gen", cmd_gen, "generate the synthetic datasets")
    sp = add("train-base", cmd_train_base, "train and calibrate the base teacher")
    sp.add_argument("--mode", choices=["BASE_OE", "BASE_CE"])
    sp = add("iterate", cmd_iterate, "run the full self-training loop")
    sp.add_argument("--mode")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from <out>/state")
    sp.add_argument("--stop-after", type=int, help="stop once this many rounds are done")
    sp = add("eval", cmd_eval, "evaluate a model checkpoint")
    sp.add_argument("--model", required=True)
    sp.add_argument("--iteration", type=int, default=0)
    sp = add("oracle-check", cmd_oracle_check, "check the closed-form and recursive oracles")
    sp.add_argument("--model")
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--t-max", type=int, default=3)
    sp.add_argument("--grid", type=int, default=101)
    sp.add_argument("--samples", type=int, default=10_000)
    sp = add("dedup", cmd_dedup, "near-duplicate removal")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--refs", nargs="+", required=True)
    sp.add_argument("--out-mask")
    sp.add_argument("--audit")
    sp = add("compare", cmd_compare, "compare modes over seeds on shared data")
    sp.add_argument("--modes", nargs="+", default=["ODST", "ST", "ST_OT"])
    sp.add_argument("--seeds", nargs="+", type=int)
    sp = add("report", cmd_report, "re-render CSV and SVG reports from a metrics file")
    sp.add_argument("--metrics")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except StageError as exc:
        print(f"odst {args.stage}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"odst {args.stage}: [{args.stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
