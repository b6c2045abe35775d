"""Command-line surface: subcommands, precedence, exit codes, files."""

import json

import numpy as np
import pytest

from dpmemfit import clipping
from dpmemfit.cli import OUT_ROOT_ENV, main

TINY = {
    "arch": "full", "depth": 1, "width": 16, "ffn_hidden": 24, "vocab": 12,
    "seq_len": 6, "num_classes": 3, "batch_size": 8, "steps": 4,
    "learning_rate": 0.001, "eval_every": 2, "epsilon": "inf",
    "clip_bound": "inf", "dtype": "float64", "data_seed": 5,
    "data_gen_dim": 4, "train_size": 64, "val_size": 24, "test_size": 24,
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()))
    return path


@pytest.fixture(autouse=True)
def no_out_root(monkeypatch):
    monkeypatch.delenv(OUT_ROOT_ENV, raising=False)


def test_train_writes_report(cfg_file, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "test accuracy" in stdout
    report = json.loads((out / "run-full-epsinf-seed0.json").read_text())
    assert report["config"]["arch"] == "full"


def test_train_without_out_prints_report_json(cfg_file, capsys):
    assert main(["train", "--config", str(cfg_file)]) == 0
    stdout = capsys.readouterr().out
    payload = json.loads(stdout[stdout.index("{"):])
    assert payload["schema_version"] == 1


def test_out_root_env_is_default(cfg_file, tmp_path, monkeypatch, capsys):
    root = tmp_path / "rootdir"
    monkeypatch.setenv(OUT_ROOT_ENV, str(root))
    assert main(["train", "--config", str(cfg_file)]) == 0
    capsys.readouterr()
    assert (root / "run-full-epsinf-seed0.json").exists()


def test_seed_flag_beats_config_and_set(cfg_file, tmp_path, capsys):
    out = tmp_path / "runs"
    code = main(["train", "--config", str(cfg_file), "--set", "seed=2",
                 "--seed", "9", "--out", str(out)])
    assert code == 0
    capsys.readouterr()
    assert (out / "run-full-epsinf-seed9.json").exists()


def test_gen_data_writes_splits(cfg_file, tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(out)]) == 0
    capsys.readouterr()
    for split in ("train", "val", "test"):
        assert (out / f"{split}.txt").exists()
    header = (out / "train.txt").read_text().splitlines()[0]
    assert "seed=5" in header


def test_gen_data_seed_overrides_data_seed(cfg_file, tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(out),
                 "--seed", "77"]) == 0
    capsys.readouterr()
    assert "seed=77" in (out / "train.txt").read_text().splitlines()[0]


def test_gen_data_needs_a_destination(cfg_file, capsys):
    assert main(["gen-data", "--config", str(cfg_file)]) == 2
    assert "output directory" in capsys.readouterr().err


def test_predict_mem_prints_table_and_writes_json(cfg_file, tmp_path, capsys):
    out = tmp_path / "pm"
    assert main(["predict-mem", "--config", str(cfg_file), "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "elements" in stdout and "optimizer" in stdout
    payload = json.loads((out / "predict-mem.json").read_text())
    assert payload["kind"] == "full"
    assert payload["elements"]["forward"] > 0


def test_verify_single_suite(tmp_path, capsys):
    assert main(["verify", "accountant", "--out", str(tmp_path)]) == 0
    stdout = capsys.readouterr().out
    assert "verify: PASS" in stdout
    assert (tmp_path / "verify-accountant.json").exists()


def test_verify_exit_code_on_failure(monkeypatch, capsys):
    monkeypatch.setattr(clipping, "FAULT_FLIP_GHOST_SIGN", True)
    assert main(["verify", "ghostnorm"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_verify_config_file_keys(tmp_path, capsys):
    vc = tmp_path / "verify.cfg"
    vc.write_text("suite = accountant\nseed = 3\n")
    assert main(["verify", "--config", str(vc)]) == 0
    assert "suite accountant" in capsys.readouterr().out
    vc.write_text("suite = accountant\nsteps = 4\n")
    assert main(["verify", "--config", str(vc)]) == 2
    assert "suite/seed" in capsys.readouterr().err


def test_verify_rejects_unknown_suite_name():
    with pytest.raises(SystemExit) as exc:
        main(["verify", "spelling"])
    assert exc.value.code == 2


def test_sweep_csv_and_exit(cfg_file, tmp_path, capsys):
    out = tmp_path / "sw"
    code = main(["sweep", "--config", str(cfg_file), "--archs", "full,bitfit",
                 "--epsilons", "inf", "--set", "steps=2", "--out", str(out)])
    assert code == 0
    stdout = capsys.readouterr().out
    assert stdout.startswith("arch,epsilon,status")
    rows = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 3
    assert (out / "sweep.json").exists()


def test_sweep_exit_1_when_a_row_fails(cfg_file, capsys):
    # width 16 is not divisible by reduction 5, so the side row errors out
    code = main(["sweep", "--config", str(cfg_file), "--archs", "full,side",
                 "--epsilons", "inf", "--set", "steps=2",
                 "--set", "side_reduction=5"])
    assert code == 1
    assert "error" in capsys.readouterr().out


def test_sweep_rejects_unknown_arch(cfg_file, capsys):
    assert main(["sweep", "--config", str(cfg_file), "--archs", "fulll"]) == 2
    assert "unknown architectures" in capsys.readouterr().err


def test_exit_codes_for_bad_inputs(cfg_file, tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 3
    assert main(["train", "--config", str(cfg_file), "--set", "arch=bogus"]) == 2
    assert main(["train", "--config", str(cfg_file), "--set", "nonsense"]) == 2
    assert main(["train", "--config", str(cfg_file), "--set", "archh=full"]) == 2
    capsys.readouterr()


def test_divergence_exits_1(cfg_file, capsys):
    with np.errstate(over="ignore", invalid="ignore"):
        code = main(["train", "--config", str(cfg_file),
                     "--set", "learning_rate=1e6", "--set", "steps=30",
                     "--set", "dtype=float32", "--set", "optimizer=dp-sgd"])
    assert code == 1
    assert "run failed" in capsys.readouterr().err


def test_train_config_required_fields_still_open(capsys):
    # no config file at all: defaults + overrides alone drive the run
    code = main(["train", "--set", "steps=1", "--set", "depth=1",
                 "--set", "width=8", "--set", "ffn_hidden=8",
                 "--set", "vocab=10", "--set", "seq_len=4",
                 "--set", "train_size=32", "--set", "val_size=16",
                 "--set", "test_size=16", "--set", "batch_size=8",
                 "--set", "epsilon=inf", "--set", "clip_bound=inf",
                 "--set", "data_gen_dim=4"])
    assert code == 0
    capsys.readouterr()
