import json
from pathlib import Path

import numpy as np
import pytest

from fncgen.cli import main
from fncgen.data import read_fnc
from fncgen.tensor import DIFFERENTIABLE_OPS

TINY_CONFIG = {
    "data": {"n_subjects": 10, "volume_dims": [8, 8, 8], "fnc_order": 8,
             "latent_dim": 4, "seed": 5},
    "model": {"patch_size": 4, "d_model": 16, "n_heads": 2, "n_blocks": 1,
              "ffn_hidden": 24, "fragment_side": 2, "disc_patch": 4,
              "perceptual_patch": 4, "perceptual_blocks": [1]},
    "train": {"epochs": 2, "batch_size": 4, "cv_folds": 2, "seed": 5},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


def dir_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_writes_dataset(tiny_config, tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert (out / "manifest.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_subjects"] == 10
    assert len(list((out / "subjects").glob("*.vol"))) == 10
    assert "wrote 10 subjects" in capsys.readouterr().out


def test_gen_data_seed_determinism(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(a), "--seed", "42"]) == 0
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(b), "--seed", "42"]) == 0
    assert dir_bytes(a) == dir_bytes(b)


def test_gen_data_refuses_nonempty_dir(tiny_config, tmp_path, capsys):
    out = tmp_path / "ds"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(out), "--force"]) == 0


def test_gen_data_dry_run_writes_nothing(tiny_config, tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()
    assert "dry-run ok" in capsys.readouterr().out


def test_invalid_config_key_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"epochz": 10}}))
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "d")]) == 2
    assert "epochz" in capsys.readouterr().err


def test_unknown_section_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"trainer": {}}))
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "d")]) == 2
    assert "trainer" in capsys.readouterr().err


def test_env_seed_override(tiny_config, tmp_path, monkeypatch):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    monkeypatch.setenv("FNCGEN_SEED", "99")
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(a)]) == 0
    monkeypatch.delenv("FNCGEN_SEED")
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(b), "--seed", "99"]) == 0
    assert dir_bytes(a) == dir_bytes(b)
    # flag wins over env
    monkeypatch.setenv("FNCGEN_SEED", "1")
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(c), "--seed", "99"]) == 0
    assert dir_bytes(a) == dir_bytes(c)


def test_env_seed_must_be_integer(tiny_config, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FNCGEN_SEED", "not-a-number")
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(tmp_path / "d")]) == 2
    assert "FNCGEN_SEED" in capsys.readouterr().err


def test_train_requires_data_flag():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", "/tmp/nope"])
    assert exc.value.code == 2


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-train")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_CONFIG))
    data = root / "ds"
    run = root / "run"
    assert main(["gen-data", "--config", str(config), "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--config", str(config),
                 "--out", str(run), "--cv", "2"]) == 0
    return config, data, run


def test_train_populates_run_dir(trained_run):
    _, _, run = trained_run
    assert (run / "config.json").exists()
    assert (run / "checkpoints" / "fold0_final.fnck").exists()
    assert (run / "checkpoints" / "fold1_final.fnck").exists()
    assert (run / "reports" / "aggregate.json").exists()
    log = (run / "logs" / "fold0.jsonl").read_text().strip().split("\n")
    assert len(log) == 2
    row = json.loads(log[0])
    assert set(row) == {"epoch", "lr", "d_loss", "g_gan", "g_mse", "g_perc",
                        "g_corr", "g_total", "eval_pearson", "eval_cosine"}


def test_train_snapshot_echoes_defaults(trained_run):
    _, _, run = trained_run
    snapshot = json.loads((run / "config.json").read_text())
    assert snapshot["train"]["epochs"] == 2
    assert snapshot["losses"]["lambda1"] == 10.0  # default echoed
    meta = json.loads((run / "meta.json").read_text())
    assert meta["cv_folds"] == 2


def test_rerunning_from_snapshot_reproduces_logs(trained_run, tmp_path):
    _, data, run = trained_run
    rerun = tmp_path / "rerun"
    assert main(["train", "--data", str(data), "--config", str(run / "config.json"),
                 "--out", str(rerun)]) == 0
    for fold in (0, 1):
        orig = (run / "logs" / f"fold{fold}.jsonl").read_bytes()
        again = (rerun / "logs" / f"fold{fold}.jsonl").read_bytes()
        assert orig == again


def test_eval_writes_report_and_is_deterministic(trained_run, capsys):
    _, data, run = trained_run
    report_path = run / "reports" / "fold0_eval.json"
    train_written = report_path.read_bytes()
    assert main(["eval", "--run", str(run), "--data", str(data), "--fold", "0"]) == 0
    first = report_path.read_bytes()
    assert first == train_written  # the eval command reproduces the training-time report
    assert main(["eval", "--run", str(run), "--data", str(data), "--fold", "0"]) == 0
    assert report_path.read_bytes() == first
    assert (run / "reports" / "fold0_diff_generated.csv").exists()
    assert (run / "reports" / "fold0_diff_real.csv").exists()
    out = capsys.readouterr().out
    assert "group_diff_pearson=" in out
    report = json.loads(first)
    assert set(report["subjects"]) and "block_table" in report


def test_eval_rejects_wrong_dataset_order(trained_run, tmp_path, capsys):
    config, data, run = trained_run
    other_cfg = json.loads(config.read_text())
    other_cfg["data"]["fnc_order"] = 16
    other_cfg["data"]["latent_dim"] = 4
    cfg_path = tmp_path / "other.json"
    cfg_path.write_text(json.dumps(other_cfg))
    other_data = tmp_path / "ds16"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(other_data)]) == 0
    assert main(["eval", "--run", str(run), "--data", str(other_data), "--fold", "0"]) == 2
    err = capsys.readouterr().err
    assert "shape" in err or "match" in err


def test_synth_output_passes_invariants(trained_run, tmp_path):
    _, data, run = trained_run
    out = tmp_path / "gen.fnc"
    assert main(["synth", "--run", str(run), "--data", str(data),
                 "--subject", "sub-0003", "--out", str(out)]) == 0
    m = read_fnc(out)
    assert np.array_equal(m, m.T)
    assert np.all(np.diag(m) == 1.0)


def test_synth_class_conditioning_changes_output(trained_run, tmp_path):
    _, data, run = trained_run
    a, b = tmp_path / "hc.fnc", tmp_path / "sz.fnc"
    base = ["synth", "--run", str(run), "--data", str(data), "--subject", "sub-0003"]
    assert main(base + ["--class", "HC", "--out", str(a)]) == 0
    assert main(base + ["--class", "SZ", "--out", str(b)]) == 0
    assert not np.array_equal(read_fnc(a), read_fnc(b))
    assert main(base + ["--class", "HC", "--out", str(tmp_path / "hc2.fnc")]) == 0
    assert a.read_bytes() == (tmp_path / "hc2.fnc").read_bytes()


def test_synth_unknown_subject(trained_run, tmp_path, capsys):
    _, data, run = trained_run
    assert main(["synth", "--run", str(run), "--data", str(data),
                 "--subject", "sub-9999", "--out", str(tmp_path / "x.fnc")]) == 2
    assert "sub-9999" in capsys.readouterr().err


def test_train_dry_run_writes_nothing(trained_run, tmp_path):
    config, data, _ = trained_run
    out = tmp_path / "dry"
    assert main(["train", "--data", str(data), "--config", str(config),
                 "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()


def test_eval_and_synth_dry_runs_write_nothing(trained_run, tmp_path):
    _, data, run = trained_run
    before = dir_bytes(run)
    assert main(["eval", "--run", str(run), "--data", str(data),
                 "--fold", "1", "--dry-run"]) == 0
    assert dir_bytes(run) == before
    out = tmp_path / "dry.fnc"
    assert main(["synth", "--run", str(run), "--data", str(data),
                 "--subject", "sub-0001", "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()


def test_train_ablation_flags_recorded(trained_run, tmp_path):
    config, data, _ = trained_run
    out = tmp_path / "ablate"
    assert main(["train", "--data", str(data), "--config", str(config), "--out", str(out),
                 "--cv", "2", "--fold", "0", "--epochs", "1",
                 "--no-class-id", "--no-corr-loss", "--no-perc-loss"]) == 0
    snapshot = json.loads((out / "config.json").read_text())
    assert snapshot["train"]["class_identifier"] is False
    assert snapshot["train"]["use_corr_loss"] is False
    assert snapshot["train"]["use_perceptual_loss"] is False
    row = json.loads((out / "logs" / "fold0.jsonl").read_text().strip())
    assert row["g_perc"] == 0.0 and row["g_corr"] == 0.0


def test_gradcheck_cli_lists_every_op(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    for name in DIFFERENTIABLE_OPS:
        assert name in out
    assert "all" in out and "passed" in out


def test_gradcheck_cli_fails_on_broken_op(monkeypatch, capsys):
    from fncgen.gradcheck import CheckResult

    def fake_run(seed=0):
        return [CheckResult("sabotaged-op", max_rel_err=0.5, tol=1e-4)]

    monkeypatch.setattr("fncgen.gradcheck.run_gradcheck", fake_run)
    assert main(["gradcheck"]) == 1
    captured = capsys.readouterr()
    assert "FAIL" in captured.out
    assert "FAILED" in captured.err


def test_missing_dataset_exits_2(tiny_config, tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "absent"), "--config", str(tiny_config),
                 "--out", str(tmp_path / "run")]) == 2


def test_console_script_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "fncgen.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("gen-data", "train", "eval", "synth", "gradcheck"):
        assert sub in proc.stdout
