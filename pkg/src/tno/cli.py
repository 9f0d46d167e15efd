"""Command-line entry point: generate | train | eval | ablate.

Runs are driven by a strict JSON config; every command writes its resolved
configuration next to its outputs so reruns are reproducible byte for byte
(train-log wall-clock seconds excepted).

Exit codes: 0 success, 2 invalid config, 3 missing input, 4 incompatible
checkpoint.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .data import DEFAULT_DATASET, generate_dataset, load_dataset
from .evaluation import (ablation_suite, error_accumulation_curve, extrapolation_start,
                         super_resolution_eval)
from .model import TNOConfig
from .tensorio import load_checkpoint, write_json
from .training import TrainPlan, train_run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


class CheckpointError(ValueError):
    pass


DEFAULT_EVAL = {"n_windows": 2, "include_fine": True, "split": "test", "extrapolation_only": True}

_TOP_KEYS = {"seed", "out_dir", "dataset", "model", "train", "eval"}


def default_config() -> dict:
    model = TNOConfig().to_dict()
    model["input_channels"] = None  # resolved from the dataset at train time
    return {
        "seed": 0,
        "out_dir": None,
        "dataset": dict(DEFAULT_DATASET, path=None),
        "model": model,
        "train": TrainPlan().to_dict(),
        "eval": dict(DEFAULT_EVAL),
    }


def _check_keys(given: dict, allowed, context: str):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")


def _merge_section(base: dict, override: dict | None, context: str) -> dict:
    if override is None:
        return dict(base)
    if not isinstance(override, dict):
        raise ConfigError(f"{context} section must be an object")
    _check_keys(override, base, context)
    merged = dict(base)
    merged.update(override)
    return merged


def load_config(path: str | None) -> dict:
    base = default_config()
    if path is None:
        return base
    try:
        with open(path) as f:
            user = json.load(f)
    except FileNotFoundError as exc:
        raise MissingInputError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(user, _TOP_KEYS, "config")
    cfg = dict(base)
    for key in ("seed", "out_dir"):
        if key in user:
            cfg[key] = user[key]
    for section in ("dataset", "model", "train", "eval"):
        cfg[section] = _merge_section(base[section], user.get(section), section)
    return cfg


def apply_overrides(cfg: dict, sets: list[str]):
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"--set path {key!r} not found in config")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"--set key {key!r} not found in config")
        node[parts[-1]] = value


def _resolve(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["out_dir"] = args.out
    if cfg["out_dir"] is None:
        cfg["out_dir"] = os.environ.get("TNO_OUT_DIR", "runs/default")
    if cfg["dataset"]["path"] is None:
        cfg["dataset"]["path"] = str(Path(cfg["out_dir"]) / "dataset")
    # the dataset keeps its own seed so several training seeds share one dataset
    cfg["train"]["seed"] = cfg["seed"]
    return cfg


def _resolved_model_config(cfg: dict, dataset) -> TNOConfig:
    model_cfg = dict(cfg["model"])
    if model_cfg.get("S") is None:
        model_cfg["S"] = min(dataset.mask.shape)
    if model_cfg.get("input_channels") in (None, 0):
        model_cfg["input_channels"] = dataset.input_channels
    try:
        return TNOConfig.from_dict(model_cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _write_resolved(cfg: dict, command: str):
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / f"resolved_config.{command}.json", cfg)


def cmd_generate(cfg: dict, threads: int) -> int:
    ds_cfg = dict(cfg["dataset"])
    path = ds_cfg.pop("path")
    try:
        generate_dataset(path, ds_cfg, threads=threads)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write_resolved(cfg, "generate")
    print(f"dataset written to {path}")
    return EXIT_OK


def _load_dataset_checked(cfg: dict):
    path = Path(cfg["dataset"]["path"])
    if not (path / "manifest.json").exists():
        raise MissingInputError(f"dataset not found at {path} (run generate first)")
    return load_dataset(path)


def cmd_train(cfg: dict) -> int:
    dataset = _load_dataset_checked(cfg)
    config = _resolved_model_config(cfg, dataset)
    try:
        plan = TrainPlan.from_dict(cfg["train"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg["model"] = config.to_dict()
    _write_resolved(cfg, "train")
    out_dir = Path(cfg["out_dir"])
    _, _, checkpoints = train_run(plan, config, dataset, out_dir=out_dir, quiet=False)
    print(f"checkpoints: {', '.join(str(p) for p in checkpoints.values())}")
    return EXIT_OK


def _load_checkpoint_checked(ckpt_path, dataset):
    ckpt_path = Path(ckpt_path)
    if not (ckpt_path / "manifest.json").exists():
        raise MissingInputError(f"checkpoint not found at {ckpt_path}")
    try:
        model, manifest = load_checkpoint(ckpt_path)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    if model.config.input_channels != dataset.input_channels:
        raise CheckpointError(
            f"checkpoint expects {model.config.input_channels} input channels, "
            f"dataset provides {dataset.input_channels}")
    h, w = dataset.mask.shape
    if h < model.config.S or w < model.config.S:
        raise CheckpointError(f"dataset grid {h}x{w} smaller than checkpoint pooling size {model.config.S}")
    return model, manifest


def cmd_eval(cfg: dict, checkpoint: str | None) -> int:
    dataset = _load_dataset_checked(cfg)
    ckpt = checkpoint or str(Path(cfg["out_dir"]) / "checkpoint_best")
    model, _ = _load_checkpoint_checked(ckpt, dataset)
    _write_resolved(cfg, "eval")
    ev = cfg["eval"]
    t_lo = extrapolation_start(dataset) if ev["extrapolation_only"] else 0
    run_id = f"{model.config.variant}-seed{cfg['seed']}"
    table = error_accumulation_curve(model, dataset, n_windows=ev["n_windows"],
                                     split=ev["split"], t_lo=t_lo, run_id=run_id)
    if ev["include_fine"]:
        fine = dataset.resampled("2-up")
        table.extend(super_resolution_eval(model, fine, n_windows=ev["n_windows"],
                                           split=ev["split"], t_lo=t_lo, run_id=run_id))
    out_csv = Path(cfg["out_dir"]) / "metrics.csv"
    table.write_csv(out_csv)
    print(f"metrics written to {out_csv}")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    dataset = _load_dataset_checked(cfg)
    config = _resolved_model_config(cfg, dataset)
    try:
        plan = TrainPlan.from_dict(cfg["train"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg["model"] = config.to_dict()
    _write_resolved(cfg, "ablate")
    ev = cfg["eval"]
    out_dir = Path(cfg["out_dir"])
    table = ablation_suite(dataset, config, plan, n_windows=ev["n_windows"],
                           include_fine=ev["include_fine"], out_dir=out_dir / "ablation")
    out_csv = out_dir / "metrics_ablation.csv"
    table.write_csv(out_csv)
    failures = table.metadata.get("failures", {})
    if failures:
        print(f"variants failed: {sorted(failures)}", file=sys.stderr)
    print(f"ablation metrics written to {out_csv}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tno", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--out", default=None, help="output directory (default TNO_OUT_DIR or runs/default)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. --set model.p=10")
        if name == "eval":
            p.add_argument("--checkpoint", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        apply_overrides(cfg, args.set)
        cfg = _resolve(cfg, args)
        if args.command == "generate":
            return cmd_generate(cfg, args.threads)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        return cmd_ablate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
