import json
from dataclasses import replace

import numpy as np
import pytest

from lakd import cli
from lakd.cli import (EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_MISMATCH, EXIT_OK, EXIT_PARTIAL, cmd_ablate, cmd_eval,
                      cmd_train, detach_cells, detach_locations, main, ndam_cells)
from lakd.config import NetSpec, RunConfig
from lakd.data import DatasetSpec
from lakd.losses import LossWeights
from lakd.models import load_checkpoint
from lakd.sdm import PartitionPlan
from lakd.train import read_record_csv

TINY = ["--train-size", "60", "--val-size", "30", "--epochs", "1", "--batch-size", "20",
        "--student-depth", "6", "--student-width", "2", "--teacher-depth", "6", "--teacher-width", "8",
        "--align-at", "2,4,6", "--detach-after", "2,4", "-q"]


def tiny_config(teacher, tmp_path=None, **changes):
    cfg = RunConfig(dataset=DatasetSpec(train_size=60, val_size=30), student=NetSpec(6, 2, 0),
                    teacher=NetSpec(6, 8, checkpoint=str(teacher)), plan=PartitionPlan((2, 4), (2, 4, 6)),
                    epochs=2, batch_size=20, eval_cka=False,
                    output_dir=str(tmp_path) if tmp_path else None)
    return replace(cfg, **changes)


def test_scratch_smoke_writes_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--regime", "scratch", *TINY, "--output-dir", str(out)]) == EXIT_OK
    h, rows = read_record_csv(out / "record.csv")
    meta = json.loads((out / "record.json").read_text())
    assert h == meta["config_hash"] == RunConfig.from_dict(meta["config"]).hash()
    assert [r["epoch"] for r in rows] == [1]
    assert 0 <= rows[0]["val_top1"] <= 1 and rows[0]["peak_retained"] > 0
    assert load_checkpoint(out / "model.ckpt").depth == 6


@pytest.mark.parametrize("regime", ["lakd", "traditional-kd", "attention-kd"])
def test_distill_regimes_run(tmp_path, tiny_teacher_path, regime):
    out = tmp_path / regime
    argv = ["train", "--regime", regime, *TINY, "--teacher-checkpoint", str(tiny_teacher_path),
            "--output-dir", str(out)]
    assert main(argv) == EXIT_OK
    _, rows = read_record_csv(out / "record.csv")
    assert rows[0]["ek"] is not None and len(rows[0]["layer_l2"]) == 3


def test_flags_override_config_file(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"epochs": 7, "batch_size": 5, "weights": {"alpha": 0.2}}))
    assert main(["train", "--config", str(path), "--epochs", "3", "--print-config"]) == EXIT_OK
    cfg = RunConfig.from_json(capsys.readouterr().out)
    assert (cfg.epochs, cfg.batch_size, cfg.weights.alpha) == (3, 5, 0.2)
    assert main(["train", "--paper-scale", "--print-config"]) == EXIT_OK
    cfg = RunConfig.from_json(capsys.readouterr().out)
    assert (cfg.epochs, cfg.optim.nesterov, cfg.dataset.image_size) == (300, True, 32)


def test_exit_codes(tmp_path, tiny_teacher_path, capsys):
    assert main(["train", "--regime", "scratch", "--epochs", "0", "-q"]) == EXIT_CONFIG
    assert "epochs" in capsys.readouterr().err
    assert main(["train", "--regime", "lakd", *TINY, "--detach-after", "6",
                 "--teacher-checkpoint", str(tiny_teacher_path)]) == EXIT_CONFIG
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage!" * 4)
    assert main(["eval", "--checkpoint", str(bad), *TINY]) == EXIT_CHECKPOINT
    assert main(["eval", "--checkpoint", str(tiny_teacher_path), *TINY, "--num-classes", "4"]) == EXIT_MISMATCH
    assert main(["train", "--regime", "lakd", *TINY, "--teacher-checkpoint", str(tmp_path / "missing")]) == EXIT_CONFIG


def test_lakd_degenerates_to_attention_kd(tiny_teacher_path):
    base = tiny_config(tiny_teacher_path, weights=LossWeights(0.5, 0.0), plan=PartitionPlan((), (2, 4, 6)))
    a = cmd_train(replace(base, regime="lakd"))
    b = cmd_train(replace(base, regime="attention-kd"))
    assert [r["loss_total"] for r in a.rows] == [r["loss_total"] for r in b.rows]
    assert a.numeric_content()[-1]["val_top1"] == b.numeric_content()[-1]["val_top1"]


def test_reproducible_and_eval_consistent(tmp_path, tiny_teacher_path):
    cfg = tiny_config(tiny_teacher_path, tmp_path / "a", regime="lakd")
    a = cmd_train(cfg)
    b = cmd_train(replace(cfg, output_dir=None))
    assert a.numeric_content() == b.numeric_content()
    assert a.config_hash == cfg.hash()
    row = cmd_eval(tmp_path / "a" / "model.ckpt", cfg.dataset, tiny_teacher_path, with_cka=False)
    assert row["top1"] == a.final["val_top1"] and row["ek"] == a.final["ek"]


def test_eval_teacher_against_itself(tmp_path, tiny_teacher_path):
    spec = DatasetSpec(train_size=60, val_size=30)
    row = cmd_eval(tiny_teacher_path, spec, tiny_teacher_path, attention_dir=tmp_path / "att")
    assert row["ek"] == 0.0  # an untrained teacher is wrong somewhere
    diag = np.diag(np.array(row["cka"]))
    np.testing.assert_allclose(diag, 1.0, atol=1e-12)
    assert len(list((tmp_path / "att").glob("*.pgm"))) > 0


def test_eval_surfaces_undefined_ek(monkeypatch, tiny_teacher_path):
    spec = DatasetSpec(train_size=60, val_size=30)
    monkeypatch.setattr(cli, "predictions", lambda z: cli._load_data(spec)[1].labels)
    row = cmd_eval(tiny_teacher_path, spec, tiny_teacher_path, with_cka=False)
    assert row["ek"] is None and "EK undefined" in row["ek_error"]


def test_sweep_cells():
    assert detach_locations(9) == [[3, 6, 9], [2, 5, 9], [1, 4, 9]]
    base = RunConfig()
    labels = [label for label, _ in detach_cells(base)]
    assert labels[0] == {"detach": "none", "location": [3, 6, 9]} and len(labels) == 4
    rows = ndam_cells(base)
    assert [(l["abs"], l["alpha"], l["beta"]) for l, _ in rows] == [
        ("off", 0.0, 0.0), ("yes", 0.5, 0.5), ("no", 0.5, 0.5), ("yes", 0.25, 0.75), ("no", 0.25, 0.75)]


def test_single_cell_sweep_equals_train(tiny_teacher_path):
    cfg = tiny_config(tiny_teacher_path, regime="lakd")
    (row,) = cmd_ablate([({"name": "only"}, cfg)])
    rec = cmd_train(cfg)
    assert row["status"] == "ok" and row["top1"] == rec.final["val_top1"] and row["ek"] == rec.final["ek"]


def test_sweep_order_independent(tmp_path, tiny_teacher_path):
    cells = ndam_cells(tiny_config(tiny_teacher_path, epochs=1))
    fwd = cmd_ablate(cells, tmp_path / "fwd")
    rev = cmd_ablate(cells[::-1], tmp_path / "rev", workers=2)
    assert fwd == rev[::-1]
    assert (tmp_path / "fwd" / "table.csv").read_text().count("\n") == 6


def test_failed_cell_gives_partial_exit(monkeypatch, tmp_path, tiny_teacher_path):
    real = cli.cmd_train

    def flaky(config, teacher=None):
        if config.plan.detach_after == (1, 3):
            raise RuntimeError("boom")
        return real(config, teacher)

    monkeypatch.setattr(cli, "cmd_train", flaky)
    argv = ["ablate", "--sweep", "detach", "--locations", "2,4,6;1,3,6", *TINY,
            "--teacher-checkpoint", str(tiny_teacher_path), "--output-dir", str(tmp_path)]
    assert main(argv) == EXIT_PARTIAL
    table = (tmp_path / "table.csv").read_text()
    assert "failed: RuntimeError: boom" in table and table.count("ok") == 2
