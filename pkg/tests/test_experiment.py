import numpy as np
import pytest
import yaml

from odst.cli import main
from odst.dedup import ImageTensor
from odst.experiment import (ExperimentConfig, StageError, compare_modes, generate_data, run_experiment)
from odst.metrics import reports_from_csv
from odst.model import ClassifierModel, Mode, TrainConfig

TINY_TRAIN = dict(epochs=4, batch_size=32, lr=0.05, decay_epochs=[3], hidden=[8])
TINY = dict(n=40, m=2000, n_in_val=200, n_ood_val=300, n_test=500, n_ood_test=500, alpha=0.9, train=TINY_TRAIN)


def tiny(**kw):
    d = dict(TINY)
    d.update(kw)
    return ExperimentConfig.from_dict(d)


def test_config_from_dict_sections():
    cfg = ExperimentConfig.from_dict({"selection": {"alpha": 0.95}, "data": {"n": 10}, "train": {"epochs": 3}})
    assert (cfg.alpha, cfg.n, cfg.train.epochs) == (0.95, 10, 3)
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(mode=Mode.BASE_OE)


def test_zero_iterations_gives_base_row_only():
    state = run_experiment(tiny(iterations=0), write=False)
    assert len(state.history) == 1 and state.history[0].accepted is None


def test_three_iterations_schedule_and_rows():
    state = run_experiment(tiny(iterations=3), write=False)
    assert [r.iteration for r in state.history] == [0, 1, 2, 3]
    assert state.history[-1].accepted is None
    k = {(row[0], row[2] + row[4]) for row in state.selection_table if row[2] > 0}
    assert k == {(0, 5 * 40 // 4), (1, 10 * 40 // 4), (2, 15 * 40 // 4)}


def test_non_iterative_single_round_with_final_k():
    state = run_experiment(tiny(iterations=3, mode="NON_ITERATIVE"), write=False)
    assert len(state.history) == 2
    assert {row[2] + row[4] for row in state.selection_table if row[2] > 0} == {15 * 40 // 4}


def test_runs_are_byte_identical(tmp_path):
    a = run_experiment(tiny(iterations=1, out=str(tmp_path / "a")))
    b = run_experiment(tiny(iterations=1, out=str(tmp_path / "b")))
    for name in ("metrics.csv", "selection.csv", "selected_t0.csv", "audit_t0.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.teacher.checksum() == b.teacher.checksum()


def test_resume_matches_uninterrupted_run(tmp_path):
    full = run_experiment(tiny(iterations=2, out=str(tmp_path / "full")))
    part = tiny(iterations=2, out=str(tmp_path / "part"))
    run_experiment(part, stop_after=1)
    resumed = run_experiment(part, resume=True)
    assert resumed.teacher.checksum() == full.teacher.checksum()
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()


def test_compare_shares_data_per_seed():
    rows, runs, sums = compare_modes(tiny(iterations=1), ["ODST", "ST"], [0, 1])
    assert [r.mode for r in rows] == ["ODST", "ST"]
    assert sums[("ODST", 0)] == sums[("ST", 0)]
    assert sums[("ODST", 0)] != sums[("ODST", 1)]


def test_stage_errors_are_tagged():
    cfg = tiny(iterations=1, world={"preset": "default_ring", "pi_in": 1.5})
    with pytest.raises(StageError) as exc:
        run_experiment(cfg, write=False)
    assert exc.value.stage == "data"


def _write_cfg(tmp_path, **kw):
    path = tmp_path / "cfg.yaml"
    d = dict(TINY)
    d.update(kw)
    path.write_text(yaml.safe_dump(d))
    return str(path)


def test_cli_pipeline(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, iterations=1)
    out = tmp_path / "run"
    assert main(["gen", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "pool.odst").exists() and (out / "checksums.json").exists()
    assert main(["train-base", "--config", cfg, "--out", str(out)]) == 0
    assert main(["eval", "--config", cfg, "--out", str(out), "--model", str(out / "base_model.bin")]) == 0
    assert main(["iterate", "--config", cfg, "--out", str(out)]) == 0
    history = reports_from_csv((out / "metrics.csv").read_text())
    assert len(history) == 2
    assert (out / "test_error.svg").read_text().startswith("<svg")
    assert main(["report", "--out", str(tmp_path / "rep"), "--metrics", str(out / "metrics.csv")]) == 0
    assert (tmp_path / "rep" / "auroc.svg").exists()
    assert main(["oracle-check", "--config", cfg, "--out", str(out), "--grid", "11", "--samples", "20",
                 "--model", str(out / "final_model.bin")]) == 0
    assert "max |closed - recursive|" in capsys.readouterr().out
    assert main(["compare", "--config", cfg, "--out", str(tmp_path / "cmp"), "--modes", "ODST", "ST",
                 "--seeds", "0"]) == 0
    assert (tmp_path / "cmp" / "comparison.csv").exists()


def test_cli_dedup(tmp_path):
    g = np.random.default_rng(0)
    refs = g.integers(0, 256, (3, 12, 12, 3), dtype=np.uint8)
    corpus = np.concatenate([g.integers(0, 256, (10, 12, 12, 3), dtype=np.uint8), refs[:1]])
    ImageTensor.from_uint8(corpus).save(tmp_path / "c.img")
    ImageTensor.from_uint8(refs).save(tmp_path / "r.img")
    rc = main(["dedup", "--corpus", str(tmp_path / "c.img"), "--refs", str(tmp_path / "r.img"),
               "--out", str(tmp_path / "d")])
    assert rc == 0
    mask = np.frombuffer((tmp_path / "d" / "mask.bin").read_bytes(), dtype=np.uint8)
    assert mask.tolist() == [0] * 10 + [1]


def test_cli_failure_exit_code(tmp_path, capsys):
    assert main(["eval", "--model", str(tmp_path / "missing.bin"), "--out", str(tmp_path)]) == 1
    assert "odst eval" in capsys.readouterr().err


def test_outlier_exposure_lowers_ood_confidence():
    from odst.model import predict_proba, train_base

    cfg = tiny(n=200, m=5000)
    data = generate_data(cfg)
    tcfg = TrainConfig(epochs=30, batch_size=32, decay_epochs=(20,), hidden=(16, 16), seed=1)
    oe = train_base(data.train, data.pool.blind(), TrainConfig(**{**tcfg.to_dict(), "mode": "BASE_OE"}))
    ce = train_base(data.train, None, TrainConfig(**{**tcfg.to_dict(), "mode": "BASE_CE"}))
    conf = lambda m: predict_proba(m, data.ood_val.x).max(axis=1).mean()
    assert conf(oe) < conf(ce)


def test_shipped_config_matches_defaults():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"
    assert ExperimentConfig.load(path).to_dict() == ExperimentConfig().to_dict()
