"""Config plumbing, the training loop, reports, and sweeps."""

import dataclasses
import json
import math

import numpy as np
import pytest

from dpmemfit.clipping import GHOST, INSTANTIATE, REDUCE
from dpmemfit.data import generate_splits
from dpmemfit.errors import ConfigError, TrainingDiverged
from dpmemfit.train import (
    CONFIG_KEYS,
    EPSILON_PRESETS,
    RunConfig,
    SAMPLING_NOTE,
    _batch_stream,
    config_from_mapping,
    evaluate,
    grid_configs,
    load_run_config,
    model_of,
    parse_config_text,
    report_core,
    resolve_datasets,
    run_filename,
    sweep,
    task_of,
    train,
)


def tiny_cfg(**over):
    base = dict(
        arch="full", depth=1, width=16, ffn_hidden=24, vocab=12, seq_len=6,
        num_classes=3, batch_size=8, steps=6, learning_rate=1e-3,
        eval_every=3, epsilon=math.inf, clip_bound=math.inf, dtype="float64",
        data_seed=5, data_gen_dim=4, train_size=64, val_size=24, test_size=24,
    )
    base.update(over)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return resolve_datasets(tiny_cfg())


# -- config parsing ----------------------------------------------------------


def test_parse_config_text_skips_comments_and_blanks():
    text = "\n".join([
        "# a comment",
        "",
        "arch = lora   # trailing comment",
        "steps=12",
        "learning_rate = 0.01",
    ])
    assert parse_config_text(text) == {
        "arch": "lora", "steps": "12", "learning_rate": "0.01"}


def test_parse_config_text_rejects_bad_lines():
    with pytest.raises(ConfigError):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError):
        parse_config_text("steps = 3\nsteps = 4\n")


def test_config_from_mapping_coercions():
    cfg = config_from_mapping({
        "epsilon": "inf", "clip_bound": "2.5", "delta": "auto",
        "noise_multiplier": "0.7", "steps": "9", "arch": "bitfit",
    })
    assert math.isinf(cfg.epsilon)
    assert cfg.clip_bound == 2.5
    assert cfg.delta is None
    assert cfg.noise_multiplier == 0.7
    assert cfg.steps == 9
    assert cfg.arch == "bitfit"


def test_config_from_mapping_rejects_unknown_and_garbled():
    with pytest.raises(ConfigError):
        config_from_mapping({"archh": "full"})
    with pytest.raises(ConfigError):
        config_from_mapping({"steps": "twelve"})
    with pytest.raises(ConfigError):
        config_from_mapping({"epsilon": "eight"})


def test_load_run_config_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("arch = side\nlearning_rate = 0.02\nsteps = 40\n")
    cfg = load_run_config(path, overrides=["learning_rate=0.5", "seed=7"])
    assert cfg.arch == "side"         # from file
    assert cfg.learning_rate == 0.5   # override wins
    assert cfg.steps == 40            # file only
    assert cfg.seed == 7              # override only
    with pytest.raises(ConfigError):
        load_run_config(path, overrides=["no-equals-here"])


def test_flat_dict_round_trips_through_mapping():
    cfg = tiny_cfg(epsilon=math.inf, delta=None, noise_multiplier=0.3)
    flat = cfg.to_flat_dict()
    assert flat["epsilon"] == "inf"
    assert flat["delta"] == "auto"
    assert set(flat) == CONFIG_KEYS
    back = config_from_mapping({k: str(v) for k, v in flat.items()})
    assert back == cfg


def test_validate_rejects_bad_fields():
    bad = [
        dict(arch="mlp"),
        dict(optimizer="sgd"),
        dict(dtype="float16"),
        dict(clip_strategy="always"),
        dict(steps=0),
        dict(batch_size=128),  # exceeds train_size=64
        dict(learning_rate=0.0),
        dict(epsilon=0.0),
        dict(delta=1.5),
        dict(noise_multiplier=-0.1),
        dict(clip_bound=0.0),
        dict(arch="side", width=30, side_reduction=4),
        dict(arch="reversible", rev_alpha=1e-4),
    ]
    for over in bad:
        with pytest.raises(ConfigError):
            tiny_cfg(**over).validate()


def test_dataset_mismatch_rejected(tiny_data):
    with pytest.raises(ConfigError):
        train(tiny_cfg(vocab=13), datasets=tiny_data)
    with pytest.raises(ConfigError):
        train(tiny_cfg(seq_len=7), datasets=tiny_data)


# -- the loop ----------------------------------------------------------------


def test_train_report_shape(tiny_data):
    cfg = tiny_cfg()
    rep = train(cfg, datasets=tiny_data)
    assert rep.schema_version == 1
    assert rep.config == cfg.to_flat_dict()
    assert len(rep.loss_trajectory) == 6
    assert all(math.isfinite(x) for x in rep.loss_trajectory)
    assert [e["step"] for e in rep.evals] == [3, 6]
    assert 0.0 <= rep.test_accuracy <= 1.0
    assert rep.final_val_accuracy == rep.evals[-1]["val_accuracy"]
    assert rep.trainable_percent == 100.0
    assert rep.privacy["noise_multiplier"] == 0.0
    assert rep.privacy["epsilon_spent"] == "inf"
    assert rep.privacy["sampling_note"] == SAMPLING_NOTE
    assert len(rep.memory.steps) == 6
    assert rep.memory.peak_bytes > 0
    strategies = set(rep.clip_strategies.values())
    assert strategies <= {GHOST, INSTANTIATE, REDUCE}
    for phase in ("forward", "backward", "clip", "optimize", "eval", "total"):
        assert rep.timing[phase] >= 0.0


def test_every_config_field_lands_in_report(tiny_data):
    rep = train(tiny_cfg(), datasets=tiny_data)
    field_names = {f.name for f in dataclasses.fields(RunConfig)}
    assert field_names == set(rep.config)


def test_train_is_deterministic_modulo_timing(tiny_data):
    a = train(tiny_cfg(seed=3), datasets=tiny_data).to_dict()
    b = train(tiny_cfg(seed=3), datasets=tiny_data).to_dict()
    assert report_core(a) == report_core(b)
    assert a["timing"] is not None
    c = train(tiny_cfg(seed=4), datasets=tiny_data).to_dict()
    assert c["loss_trajectory"] != a["loss_trajectory"]


def test_dp_run_calibrates_into_target_window(tiny_data):
    cfg = tiny_cfg(epsilon=8.0, clip_bound=1.0)
    rep = train(cfg, datasets=tiny_data)
    priv = rep.privacy
    assert priv["calibrated"] is True
    assert priv["noise_multiplier"] > 0
    assert 0.99 * 8.0 <= priv["epsilon_spent"] <= 8.0
    assert priv["rdp_argmin_order"] in priv["rdp_orders"]
    assert len(priv["rdp_orders"]) == len(priv["rdp_values"])
    assert priv["delta"] == 1.0 / 64


def test_explicit_noise_multiplier_skips_calibration(tiny_data):
    cfg = tiny_cfg(noise_multiplier=0.9, clip_bound=1.0)
    rep = train(cfg, datasets=tiny_data)
    assert rep.privacy["calibrated"] is False
    assert rep.privacy["noise_multiplier"] == 0.9
    # noise was injected, so spent epsilon is finite even with an inf target
    assert isinstance(rep.privacy["epsilon_spent"], float)
    assert rep.privacy["epsilon_spent"] > 0


def test_finite_epsilon_with_zero_noise_is_contradictory(tiny_data):
    cfg = tiny_cfg(epsilon=8.0, clip_bound=1.0, noise_multiplier=0.0)
    with pytest.raises(ConfigError):
        train(cfg, datasets=tiny_data)


def test_divergence_aborts_with_diagnostic(tiny_data):
    # f32 overflows to nan fast; raw-gradient steps avoid adam's rescaling
    cfg = tiny_cfg(
        learning_rate=1e6, steps=30, dtype="float32", optimizer="dp-sgd")
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDiverged, match=r"step \d+"):
            train(cfg, datasets=tiny_data)


def test_clip_strategy_override(tiny_data):
    for forced in (GHOST, INSTANTIATE):
        rep = train(tiny_cfg(clip_strategy=forced, steps=2), datasets=tiny_data)
        weight_strategies = {
            s for s in rep.clip_strategies.values() if s != REDUCE}
        assert weight_strategies == {forced}


def test_batch_stream_partitions_each_epoch():
    rng = np.random.default_rng(0)
    stream = _batch_stream(20, 8, rng)
    first_epoch = [next(stream) for _ in range(2)]  # 20//8 = 2 full batches
    seen = np.concatenate(first_epoch)
    assert len(seen) == 16
    assert len(set(seen.tolist())) == 16  # no repeats within an epoch
    assert all(len(b) == 8 for b in first_epoch)


def test_evaluate_matches_manual_argmax(tiny_data):
    model = model_of(tiny_cfg())
    ds = tiny_data["val"]
    acc = evaluate(model, ds, batch_size=7)
    logits = model.predict_logits(ds.tokens)
    manual = float((logits.argmax(axis=1) == ds.labels).mean())
    assert acc == pytest.approx(manual)


def test_report_written_when_out_dir_set(tmp_path, tiny_data):
    cfg = tiny_cfg(steps=2, out_dir=str(tmp_path / "runs"))
    rep = train(cfg, datasets=tiny_data)
    target = tmp_path / "runs" / run_filename(cfg)
    assert target.exists()
    loaded = json.loads(target.read_text())
    assert loaded == rep.to_dict()
    assert loaded["schema_version"] == 1


def test_generated_and_loaded_datasets_agree(tmp_path):
    from dpmemfit.data import generate_dataset, load_dataset

    cfg = tiny_cfg()
    paths = generate_dataset(task_of(cfg), tmp_path, sizes={
        "train": cfg.train_size, "val": cfg.val_size, "test": cfg.test_size})
    from_disk = {name: load_dataset(p) for name, p in paths.items()}
    in_memory = resolve_datasets(cfg)
    for name in ("train", "val", "test"):
        assert np.array_equal(from_disk[name].tokens, in_memory[name].tokens)
        assert np.array_equal(from_disk[name].labels, in_memory[name].labels)


# -- sweeps --------------------------------------------------------------------


def test_grid_configs_cardinality():
    grid = grid_configs(tiny_cfg())
    assert len(grid) == 6 * 3
    assert len({(c.arch, c.epsilon) for c in grid}) == 18
    assert set(EPSILON_PRESETS) == {1.6, 8.0, math.inf}


def test_sweep_rows_and_failure_isolation(tmp_path):
    good = tiny_cfg(steps=2)
    configs = [
        good,
        dataclasses.replace(good, arch="bitfit"),
        dataclasses.replace(good, arch="side", side_reduction=5),  # 16 % 5 != 0
    ]
    result = sweep(configs, out_dir=tmp_path)
    assert [r["status"] for r in result.rows] == ["ok", "ok", "error"]
    assert "ConfigError" in result.rows[2]["error"]
    assert result.reports[2] is None
    # epsilon=inf rows show zero noise
    assert result.rows[0]["noise_multiplier"] == 0.0
    assert result.rows[0]["epsilon_spent"] == "inf"
    # not all five tier architectures ran, so no ordering verdict
    assert {r["mem_ordering"] for r in result.rows} == {"n/a"}

    csv_text = (tmp_path / "sweep.csv").read_text()
    lines = csv_text.strip().splitlines()
    assert len(lines) == 1 + 3
    assert lines[0].startswith("arch,epsilon,status")
    sweep_json = json.loads((tmp_path / "sweep.json").read_text())
    assert len(sweep_json["rows"]) == 3
    # per-run reports for the two successes
    assert (tmp_path / run_filename(good)).exists()


def test_sweep_needs_configs():
    with pytest.raises(ConfigError):
        sweep([])
