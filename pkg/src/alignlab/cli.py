"""Command-line entry point.

Subcommands: generate, train, evaluate, sweep, ablate. Experiment inputs can
be given as one JSON config file (--config) with optional sections
"generator", "model", "train", plus sweep keys "levels" / "ratios" / "seeds";
dedicated flags override the file.

Exit codes: 0 success, 2 config error, 3 data-format error, 4 training
divergence, 5 undefined-metric condition.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import harness, model as model_mod, synthdata
from .errors import (AlignlabError, ConfigError, DataFormatError,
                     DivergenceError, UndefinedMetricError)
from .harness import TrainConfig
from .losses import DiceFpConfig
from .model import ModelConfig
from .synthdata import GeneratorConfig

EXIT_CODES = (
    (ConfigError, 2),
    (DataFormatError, 3),
    (DivergenceError, 4),
    (UndefinedMetricError, 5),
)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config JSON: {exc}") from exc


def _build(cls, section: dict, what: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from exc


def _train_config(section: dict, **overrides) -> TrainConfig:
    section = dict(section)
    dice = section.pop("dice", None)
    section.update({k: v for k, v in overrides.items() if v is not None})
    if dice is not None:
        section["dice"] = _build(DiceFpConfig, dice, "dice")
    return _build(TrainConfig, section, "train")


def _get_data(cfg: dict, data_dir=None):
    if data_dir:
        return synthdata.read_dataset(data_dir)
    if "data" in cfg:
        return synthdata.read_dataset(cfg["data"])
    gen = _build(GeneratorConfig, cfg.get("generator", {}), "generator")
    return synthdata.generate(gen)


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def cmd_generate(args):
    cfg = _load_config(args.config)
    gen = _build(GeneratorConfig, cfg.get("generator", cfg), "generator")
    splits = synthdata.generate(gen)
    synthdata.write_dataset(splits, args.out, generator_config=gen)
    print(f"wrote dataset ({', '.join(f'{k}={v.n}' for k, v in sorted(splits.items()))}) "
          f"to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    data = _get_data(cfg, args.data)
    model_cfg = _build(ModelConfig, cfg.get("model", {}), "model")
    train_cfg = _train_config(cfg.get("train", {}),
                              alignment_level=args.level,
                              alignment_mode=args.mode,
                              data_ratio=args.ratio,
                              seed=args.seed)
    params, result = harness.train(model_cfg, train_cfg, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_mod.save_checkpoint(params, out / "model.ckpt")
    (out / "config_echo.json").write_text(json.dumps(
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        indent=2, sort_keys=True))
    (out / "report.json").write_text(json.dumps(result.to_dict(), indent=2,
                                                sort_keys=True))
    flat = harness.flatten_run(result)
    with open(out / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("metric", "value"))
        for k in sorted(flat):
            if flat[k] is not None:
                writer.writerow((k, repr(flat[k])))
    print(f"trained {result.epochs_trained} epochs, "
          f"best val AUC {result.best_val_auc:.4f}; outputs in {out}")
    return 0


def cmd_evaluate(args):
    params = model_mod.load_checkpoint(args.model)
    data = synthdata.read_dataset(args.data)
    split = {"id": "test_id", "ood": "test_ood"}[args.split]
    rep = harness.evaluate_split(params, data[split])
    by_group = rep.by_sex if args.group == "sex" else rep.by_age
    doc = {"split": split, "grouping": args.group,
           "overall": rep.overall.to_dict(), "fairness": by_group.to_dict()}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"wrote {args.out}")
    return 0


def _sweep_common(args):
    cfg = _load_config(args.config)
    data = _get_data(cfg)
    model_cfg = _build(ModelConfig, cfg.get("model", {}), "model")
    base = _train_config(cfg.get("train", {}))
    seeds = _parse_seeds(args.seeds) if args.seeds else cfg.get("seeds", [0, 1])
    return cfg, data, model_cfg, base, seeds


def cmd_sweep(args):
    cfg, data, model_cfg, base, seeds = _sweep_common(args)
    if args.kind == "alignment":
        levels = tuple(cfg.get("levels", harness.ALIGNMENT_LEVELS))
        report = harness.sweep_alignment(model_cfg, base, data, levels, seeds)
    else:
        ratios = tuple(cfg.get("ratios", harness.DATA_RATIOS))
        report = harness.sweep_data_ratio(model_cfg, base, data, ratios, seeds)
    harness.write_report(args.out, {"config": cfg, "seeds": seeds,
                                    "model": model_cfg.to_dict(),
                                    "train": base.to_dict()}, report)
    print(f"sweep kind={args.kind} done; outputs in {args.out}")
    return 0


def cmd_ablate(args):
    cfg, data, model_cfg, base, seeds = _sweep_common(args)
    report = harness.ablate_random(model_cfg, base, data, seeds)
    harness.write_report(args.out, {"config": cfg, "seeds": seeds,
                                    "model": model_cfg.to_dict(),
                                    "train": base.to_dict()}, report)
    print(f"ablation done; outputs in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alignlab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the synthetic dataset")
    p.add_argument("--config", help="JSON generator config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--data", help="dataset directory (manifest.json + payload.bin)")
    p.add_argument("--level", type=int, choices=harness.ALIGNMENT_LEVELS)
    p.add_argument("--mode", choices=harness.ALIGNMENT_MODES)
    p.add_argument("--ratio", type=int, choices=harness.DATA_RATIOS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("id", "ood"), required=True)
    p.add_argument("--group", choices=("sex", "age"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="alignment-level or data-ratio sweep")
    p.add_argument("--kind", choices=("alignment", "ratio"), required=True)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="randomized-alignment ablation")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AlignlabError as exc:
        for klass, code in EXIT_CODES:
            if isinstance(exc, klass):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
