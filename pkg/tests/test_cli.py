"""End-to-end command-line tests over tiny configurations."""

import json

import numpy as np
import pytest

from wbpose import cli, synth
from wbpose.checks import CheckResult
from wbpose.config import default_config, save_config
from wbpose.optim import AdamConfig


def tiny_config_file(tmp_path, **over):
    base = dict(steps=4, batch_size=2, data_n=2, data_seed=50, eval_n=2,
                eval_seed=60, log_every=2, adam=AdamConfig(lr=1e-4))
    base.update(over)
    rc = default_config("toy", **base)
    path = tmp_path / "run.json"
    save_config(path, rc)
    return path


def test_no_command_is_a_usage_error():
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 2


def test_config_and_profile_conflict(tmp_path):
    cfg = tiny_config_file(tmp_path)
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--config", str(cfg), "--profile", "toy"])
    assert e.value.code == 2


def test_missing_config_file_fails_cleanly(tmp_path, capsys):
    rcode = cli.main(["train", "--config", str(tmp_path / "nope.json"),
                      "--out-dir", str(tmp_path / "o")])
    assert rcode == cli.EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_bad_config_field_fails_cleanly(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"stepz": 3}}))
    rcode = cli.main(["train", "--config", str(bad),
                      "--out-dir", str(tmp_path / "o")])
    assert rcode == cli.EXIT_CONFIG
    assert "stepz" in capsys.readouterr().err


def test_gradcheck_writes_table(tmp_path, capsys):
    out = tmp_path / "gc"
    assert cli.main(["gradcheck", "--out-dir", str(out)]) == cli.EXIT_OK
    text = (out / "gradcheck.txt").read_text()
    assert "pipeline_loss" in text and "ok" in text
    assert "soft_argmax_3d" in capsys.readouterr().out


def test_gradcheck_failure_exit_code(tmp_path, monkeypatch, capsys):
    fake = [CheckResult(name="x", max_rel=1.0, tol=1e-4, n_checked=1,
                        seconds=0.0, ok=False)]
    monkeypatch.setattr(cli, "run_grad_suite", lambda **kw: fake)
    rcode = cli.main(["gradcheck", "--out-dir", str(tmp_path / "gc")])
    assert rcode == cli.EXIT_CHECK
    assert "FAILED" in capsys.readouterr().err


def test_gen_data_roundtrip_and_determinism(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["gen-data", "--n", "3", "--seed", "5",
                     "--out-dir", str(d1)]) == cli.EXIT_OK
    assert cli.main(["gen-data", "--n", "3", "--seed", "5",
                     "--out-dir", str(d2)]) == cli.EXIT_OK
    samples, header = synth.load_split(d1 / "dataset.wbarch")
    assert header["count"] == 3 and len(samples) == 3
    assert (d1 / "dataset.wbarch").read_bytes() == \
        (d2 / "dataset.wbarch").read_bytes()


def test_gen_data_workers_match_serial(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    cli.main(["gen-data", "--n", "4", "--seed", "9", "--out-dir", str(d1)])
    cli.main(["gen-data", "--n", "4", "--seed", "9", "--out-dir", str(d2),
              "--workers", "2"])
    assert (d1 / "dataset.wbarch").read_bytes() == \
        (d2 / "dataset.wbarch").read_bytes()


def test_train_artifacts_and_byte_determinism(tmp_path, capsys):
    cfg = tiny_config_file(tmp_path)
    d1, d2 = tmp_path / "r1", tmp_path / "r2"
    assert cli.main(["train", "--config", str(cfg),
                     "--out-dir", str(d1)]) == cli.EXIT_OK
    assert cli.main(["train", "--config", str(cfg),
                     "--out-dir", str(d2)]) == cli.EXIT_OK
    for name in ("checkpoint.wbarch", "history.tsv", "report.txt",
                 "report.json"):
        assert (d1 / name).exists(), name
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name
    out = capsys.readouterr().out
    assert "trained 4 steps" in out
    report = json.loads((d1 / "report.json").read_text())
    assert "mpjpe" in report and "body" in report["mpjpe"]


def test_train_seed_flag_changes_checkpoint(tmp_path):
    cfg = tiny_config_file(tmp_path)
    d1, d2 = tmp_path / "r1", tmp_path / "r2"
    cli.main(["train", "--config", str(cfg), "--out-dir", str(d1)])
    cli.main(["train", "--config", str(cfg), "--seed", "7",
              "--out-dir", str(d2)])
    assert (d1 / "checkpoint.wbarch").read_bytes() != \
        (d2 / "checkpoint.wbarch").read_bytes()


def test_eval_roundtrip(tmp_path):
    cfg = tiny_config_file(tmp_path)
    train_dir = tmp_path / "train"
    cli.main(["train", "--config", str(cfg), "--out-dir", str(train_dir)])
    data_dir = tmp_path / "data"
    cli.main(["gen-data", "--n", "2", "--seed", "8",
              "--out-dir", str(data_dir)])
    out = tmp_path / "eval"
    rcode = cli.main(["eval", "--config", str(cfg),
                      "--checkpoint", str(train_dir / "checkpoint.wbarch"),
                      "--data", str(data_dir / "dataset.wbarch"),
                      "--out-dir", str(out)])
    assert rcode == cli.EXIT_OK
    report = json.loads((out / "report.json").read_text())
    for table in ("mpjpe", "pa_mpjpe", "mpvpe"):
        assert table in report
        assert np.isfinite(list(report[table].values())).all()


def test_eval_requires_checkpoint():
    with pytest.raises(SystemExit) as e:
        cli.main(["eval"])
    assert e.value.code == 2


def test_eval_missing_checkpoint_file(tmp_path, capsys):
    rcode = cli.main(["eval", "--checkpoint", str(tmp_path / "no.wbarch"),
                      "--out-dir", str(tmp_path / "o")])
    assert rcode == cli.EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_ablate_tables(tmp_path):
    cfg = tiny_config_file(tmp_path, steps=2, batch_size=1, data_n=2,
                           eval_n=1, log_every=1)
    out = tmp_path / "ab"
    assert cli.main(["ablate", "--config", str(cfg),
                     "--out-dir", str(out)]) == cli.EXIT_OK
    doc = json.loads((out / "ablation.json").read_text())
    assert set(doc) == {"wrist rotation inputs", "finger rotation features",
                        "rotation regressor inputs"}
    assert set(doc["wrist rotation inputs"]) == {
        "Body", "Body + Hand GAP", "Body + All hand joints",
        "Body + MCP joints (Ours)"}
    assert set(doc["finger rotation features"]) == {
        "With body features", "Without body features (Ours)"}
    assert set(doc["rotation regressor inputs"]) == {
        "GAP feat.", "Joint feat.", "2D joint coord.", "3D joint coord.",
        "3D joint coord. + joint feat. (Ours)"}
    for rows in doc.values():
        for m in rows.values():
            assert set(m) == {"body_mpjpe", "hands_mpvpe",
                              "hands_mpvpe_pelvis", "face_mpvpe"}
    text = (out / "ablation.txt").read_text()
    assert "Body + MCP joints (Ours)" in text


def test_default_out_dir_under_runs(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["gen-data", "--n", "1", "--seed", "3"]) == cli.EXIT_OK
    assert (tmp_path / "runs" / "data" / "dataset.wbarch").exists()
