"""Command-line front end.

Subcommands: gen-data, train, sweep, verify, predict-mem. Every one of
them accepts --config (flat key = value file), --seed, and --out; train
and sweep additionally take repeatable --set key=value overrides. Option
precedence, lowest to highest: built-in defaults, config file, --set
overrides, then the dedicated flags (--seed beats a seed from either).

When --out is omitted the output root comes from the DPMEMFIT_OUT_ROOT
environment variable; with neither set, commands that can print their
results do so and write nothing.

Exit codes: 0 success, 1 a check or run failed, 2 configuration error,
3 file or I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from .data import DEFAULT_SIZES, generate_dataset
from .errors import ConfigError, DataError, TrainingDiverged
from .memmodel import predict
from .models import MODEL_KINDS
from .train import (
    EPSILON_PRESETS,
    RunConfig,
    clip_plan_of,
    config_from_mapping,
    grid_configs,
    load_run_config,
    model_of,
    parse_config_text,
    run_filename,
    sweep,
    task_of,
    train,
)
from .verify import SUITES, verify

OUT_ROOT_ENV = "DPMEMFIT_OUT_ROOT"


def _resolve_out(flag_value: str | None) -> Path | None:
    if flag_value:
        return Path(flag_value)
    root = os.environ.get(OUT_ROOT_ENV, "").strip()
    return Path(root) if root else None


def _load_config(args, require_file: bool = False) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config is None:
        if require_file:
            raise ConfigError("this command needs --config <file>")
        mapping = {}
        for item in overrides:
            key, eq, value = item.partition("=")
            if not eq:
                raise ConfigError(f"override {item!r} is not key=value")
            if key.strip() in mapping:
                raise ConfigError(f"duplicate override {key.strip()!r}")
            mapping[key.strip()] = value.strip()
        return config_from_mapping(mapping)
    return load_run_config(args.config, overrides=overrides)


def _parse_float_list(text: str, what: str) -> list[float]:
    out = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        try:
            out.append(math.inf if piece == "inf" else float(piece))
        except ValueError as e:
            raise ConfigError(f"bad {what} value {piece!r}") from e
    if not out:
        raise ConfigError(f"empty {what} list")
    return out


# -- subcommand bodies ---------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _resolve_out(args.out)
    if out is None:
        raise ConfigError(f"gen-data needs an output directory: pass --out or set {OUT_ROOT_ENV}")
    if args.seed is not None:
        cfg = config_from_mapping({**cfg.to_flat_dict(), "data_seed": str(args.seed)})
    task = task_of(cfg)
    sizes = {"train": cfg.train_size, "val": cfg.val_size, "test": cfg.test_size}
    paths = generate_dataset(task, out, sizes=sizes)
    for split, path in paths.items():
        print(f"{split}: {path} ({sizes[split]} examples)")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _resolve_out(args.out)
    if out is not None:
        cfg = config_from_mapping({**cfg.to_flat_dict(), "out_dir": str(out)})
    report = train(cfg)
    priv = report.privacy
    print(f"arch {cfg.arch}  steps {cfg.steps}  trainable {report.trainable_percent:.4f}%")
    print(f"final val accuracy {report.final_val_accuracy:.4f}  test accuracy {report.test_accuracy:.4f}")
    print(f"epsilon spent {priv['epsilon_spent']}  noise multiplier {priv['noise_multiplier']:.4f}")
    print(f"peak memory {report.memory.peak_bytes} bytes")
    if out is not None:
        print(f"report: {Path(cfg.out_dir) / run_filename(cfg)}")
    else:
        print(report.to_json())
    return 0


def _cmd_sweep(args) -> int:
    base = _load_config(args)
    archs = args.archs.split(",") if args.archs else list(MODEL_KINDS)
    archs = [a.strip() for a in archs if a.strip()]
    unknown = [a for a in archs if a not in MODEL_KINDS]
    if unknown:
        raise ConfigError(f"unknown architectures {unknown}; choose from {list(MODEL_KINDS)}")
    epsilons = (
        _parse_float_list(args.epsilons, "epsilon") if args.epsilons else list(EPSILON_PRESETS))
    out = _resolve_out(args.out)
    result = sweep(grid_configs(base, archs=archs, epsilons=epsilons), out_dir=out)
    print(result.to_csv(), end="")
    if out is not None:
        print(f"wrote {out / 'sweep.csv'} and {out / 'sweep.json'}")
    failed = [r for r in result.rows if r["status"] != "ok"]
    ordering_failed = [r for r in result.rows if r["mem_ordering"] == "FAIL"]
    return 1 if failed or ordering_failed else 0


def _cmd_verify(args) -> int:
    suite = args.suite
    seed = 0
    if args.config is not None:
        text = Path(args.config).read_text(encoding="utf-8")
        mapping = parse_config_text(text, origin=str(args.config))
        unknown = set(mapping) - {"suite", "seed"}
        if unknown:
            raise ConfigError(f"verify config understands only suite/seed, got {sorted(unknown)}")
        if suite is None and "suite" in mapping:
            suite = mapping["suite"]
        if "seed" in mapping:
            try:
                seed = int(mapping["seed"])
            except ValueError as e:
                raise ConfigError(f"bad seed {mapping['seed']!r}") from e
    if args.seed is not None:
        seed = args.seed
    suite = suite or "all"
    run = verify(suite, seed=seed, out_dir=_resolve_out(args.out))
    for line in run.summary_lines():
        print(line)
    return 0 if run.passed else 1


def _cmd_predict_mem(args) -> int:
    cfg = _load_config(args)
    cfg.validate()
    model = model_of(cfg)
    plan = clip_plan_of(cfg, model)
    fp = predict(model, B=cfg.batch_size, plan=plan, optimizer_kind=cfg.optimizer)
    d = fp.to_dict()
    print(f"kind {fp.kind}  B {fp.B}  T {fp.T}  dtype {model.dtype.name} ({fp.dtype_size} bytes/elem)")
    print(f"{'category':<16} {'elements':>14} {'bytes':>16}")
    for name, elems in d["elements"].items():
        print(f"{name:<16} {elems:>14} {elems * fp.dtype_size:>16}")
    out = _resolve_out(args.out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        target = out / "predict-mem.json"
        target.write_text(json.dumps(d, indent=2) + "\n", encoding="ascii")
        print(f"wrote {target}")
    return 0


# -- parser and dispatch ---------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser, with_set: bool = True) -> None:
    sub.add_argument("--config", metavar="PATH", help="flat key = value config file")
    sub.add_argument("--seed", type=int, metavar="N", help="seed override")
    sub.add_argument("--out", metavar="DIR",
                     help=f"output directory (default: ${OUT_ROOT_ENV})")
    if with_set:
        sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="config override, repeatable; beats file values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpmemfit",
        description="Differentially private fine-tuning with measured memory budgets.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="write synthetic train/val/test files")
    _add_common(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = subs.add_parser("train", help="run one private training job")
    _add_common(p)
    p.set_defaults(fn=_cmd_train)

    p = subs.add_parser("sweep", help="train a grid of (architecture, epsilon) runs")
    _add_common(p)
    p.add_argument("--archs", metavar="A,B,...",
                   help=f"architectures to sweep (default: all of {','.join(MODEL_KINDS)})")
    p.add_argument("--epsilons", metavar="E,E,...",
                   help="epsilon presets to sweep, 'inf' allowed (default: 1.6,8,inf)")
    p.set_defaults(fn=_cmd_sweep)

    p = subs.add_parser("verify", help="run self-contained correctness suites")
    p.add_argument("suite", nargs="?", choices=SUITES + ("all",),
                   help="which suite to run (default: all)")
    _add_common(p, with_set=False)
    p.set_defaults(fn=_cmd_verify)

    p = subs.add_parser("predict-mem", help="print the memory footprint model, no training")
    _add_common(p)
    p.set_defaults(fn=_cmd_predict_mem)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, AssertionError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
