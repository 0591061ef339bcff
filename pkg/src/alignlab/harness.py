"""Experiment engine: deterministic training loop with the attention-
alignment schedule, AdamW, early stopping on validation AUC, per-split
fairness evaluation, and the alignment-level / data-ratio / randomized-
alignment sweeps with mean±std aggregation across seeds.

Set ALIGNLAB_WORKERS=<n> to run independent sweep runs in parallel
processes; unset means serial execution.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as model_mod
from .errors import ConfigError, DivergenceError, UndefinedMetricError
from .losses import DiceFpConfig, dice_fp_batch
from .metrics import (FairnessReport, MetricSet, METRIC_NAMES, aggregate_runs,
                      auc, fairness_report, subgroup_metrics)
from .model import ModelConfig, ModelParams, forward_batch, init_params
from .synthdata import SampleSet, maxpool_mask, random_attention

ALIGNMENT_LEVELS = (0, 25, 50, 75, 100)
DATA_RATIOS = (25, 50, 75, 100)
ALIGNMENT_MODES = ("human", "random", "none")
WORKERS_ENV = "ALIGNLAB_WORKERS"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    alignment_level: int = 0          # percent of positive train samples
    alignment_mode: str = "none"      # human | random | none
    data_ratio: int = 100             # percent of the training set used
    seed: int = 0
    dice: DiceFpConfig = field(default_factory=DiceFpConfig)

    def __post_init__(self):
        if self.alignment_level not in ALIGNMENT_LEVELS:
            raise ConfigError(f"alignment_level must be one of {ALIGNMENT_LEVELS}")
        if self.alignment_mode not in ALIGNMENT_MODES:
            raise ConfigError(f"alignment_mode must be one of {ALIGNMENT_MODES}")
        if (self.alignment_mode == "none") != (self.alignment_level == 0):
            raise ConfigError("alignment_mode 'none' if and only if alignment_level 0")
        if self.data_ratio not in DATA_RATIOS:
            raise ConfigError(f"data_ratio must be one of {DATA_RATIOS}")
        for name in ("learning_rate", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "dice"}
        d["dice"] = self.dice.__dict__.copy()
        return d


@dataclass
class SplitReport:
    overall: MetricSet
    by_sex: FairnessReport
    by_age: FairnessReport

    def to_dict(self) -> dict:
        return {"overall": self.overall.to_dict(),
                "by_sex": self.by_sex.to_dict(),
                "by_age": self.by_age.to_dict()}


@dataclass
class RunResult:
    best_val_auc: float
    epochs_trained: int
    test_id: SplitReport
    test_ood: SplitReport
    model_config: dict
    train_config: dict

    def to_dict(self) -> dict:
        return {"best_val_auc": self.best_val_auc,
                "epochs_trained": self.epochs_trained,
                "test_id": self.test_id.to_dict(),
                "test_ood": self.test_ood.to_dict(),
                "model_config": self.model_config,
                "train_config": self.train_config}


# ---------------------------------------------------------------------------
# Optimizer

class AdamWState:
    def __init__(self, n: int):
        self.m = np.zeros(n, dtype=np.float64)
        self.v = np.zeros(n, dtype=np.float64)
        self.t = 0


def adamw_step(vec: np.ndarray, grad: np.ndarray, state: AdamWState,
               cfg: TrainConfig) -> None:
    """In-place decoupled-weight-decay Adam update."""
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient in adamw_step")
    state.t += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.t)
    vec -= cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
                                + cfg.weight_decay * vec)


# ---------------------------------------------------------------------------
# Deterministic subset schedules (both nested across levels/ratios per seed)

def ratio_subset(n: int, ratio: int, seed: int) -> np.ndarray:
    """First floor(ratio% * n) indices of a seed-fixed permutation."""
    perm = np.random.default_rng([seed, 0xDA7A]).permutation(n)
    return np.sort(perm[: (n * ratio) // 100])


def alignment_subset(labels: np.ndarray, level: int, seed: int) -> np.ndarray:
    """Boolean eligibility over samples: a seed-fixed prefix covering level%
    of the positive-labeled samples. Nested: level L is a subset of L' > L."""
    pos = np.flatnonzero(np.asarray(labels).any(axis=1))
    perm = np.random.default_rng([seed, 0xA119]).permutation(pos)
    k = int(round(level / 100.0 * len(pos)))
    eligible = np.zeros(labels.shape[0], dtype=bool)
    eligible[perm[:k]] = True
    return eligible


# ---------------------------------------------------------------------------
# Evaluation

def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict_scores(params: ModelParams, ss: SampleSet, batch: int = 256):
    """Class probabilities (n, C) and per-(sample, class) hit indicators
    (n, C) with NaN where the pointing-game criterion does not apply."""
    cfg = params.config
    n, c = ss.n, ss.n_classes
    g = cfg.grid_side
    scores = np.empty((n, c), dtype=np.float64)
    hits = np.full((n, c), np.nan)
    for cls in range(c):
        for start in range(0, n, batch):
            end = min(start + batch, n)
            logits, _, aligned, _ = forward_batch(params, ss.images[start:end], cls)
            scores[start:end, cls] = _stable_sigmoid(np.asarray(logits))
            for i in range(start, end):
                if ss.labels[i, cls] == 1 and ss.masks[i, cls].any():
                    gm = maxpool_mask(ss.masks[i, cls], g).ravel()
                    peak = int(np.argmax(aligned[i - start]))
                    hits[i, cls] = 1.0 if gm[peak] else 0.0
    return scores, hits


def evaluate_split(params: ModelParams, ss: SampleSet) -> SplitReport:
    scores, hits = predict_scores(params, ss)
    return SplitReport(
        overall=subgroup_metrics(scores, ss.labels, hits),
        by_sex=fairness_report(scores, ss.labels, ss.group_labels("sex"), hits),
        by_age=fairness_report(scores, ss.labels, ss.group_labels("age_group"), hits),
    )


def macro_val_auc(params: ModelParams, ss: SampleSet, batch: int = 256) -> float:
    n, c = ss.n, ss.n_classes
    scores = np.empty((n, c), dtype=np.float64)
    for cls in range(c):
        for start in range(0, n, batch):
            end = min(start + batch, n)
            logits, _, _, _ = forward_batch(params, ss.images[start:end], cls)
            scores[start:end, cls] = logits
    vals = []
    for cls in range(c):
        try:
            vals.append(auc(scores[:, cls], ss.labels[:, cls]))
        except UndefinedMetricError:
            pass
    if not vals:
        raise UndefinedMetricError("validation AUC undefined for every class")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Training

def train(model_cfg: ModelConfig, train_cfg: TrainConfig,
          data: dict[str, SampleSet]) -> tuple[ModelParams, RunResult]:
    for split in ("train", "val", "test_id", "test_ood"):
        if split not in data:
            raise ConfigError(f"missing data split {split!r}")
    keep = ratio_subset(data["train"].n, train_cfg.data_ratio, train_cfg.seed)
    tr = data["train"].subset(keep)
    if not tr.labels.any():
        raise ConfigError("training subset has no positive samples in any class")

    eligible = alignment_subset(tr.labels, train_cfg.alignment_level, train_cfg.seed)
    n, n_classes = tr.n, tr.n_classes
    g = model_cfg.grid_side
    n_tokens = model_cfg.n_tokens

    # per-(sample, class) grid-resolution alignment targets
    human_targets = np.zeros((n, n_classes, n_tokens), dtype=np.float64)
    has_target = np.zeros((n, n_classes), dtype=bool)
    for i in range(n):
        for cls in range(n_classes):
            if tr.labels[i, cls] == 1 and tr.masks[i, cls].any():
                human_targets[i, cls] = maxpool_mask(tr.masks[i, cls], g).ravel()
                has_target[i, cls] = True
    if train_cfg.alignment_mode == "human" and eligible.any():
        missing = eligible & tr.labels.any(axis=1) & ~has_target.any(axis=1)
        if missing.any():
            raise ConfigError("alignment-eligible positives without expert masks")

    params = init_params(model_cfg, train_cfg.seed)
    state = AdamWState(params.vec.size)
    shuffle_rng = np.random.default_rng([train_cfg.seed, 0x5F0F])

    best_auc = -np.inf
    best_params = params.copy()
    best_epoch = -1
    epochs_trained = 0

    for epoch in range(train_cfg.max_epochs):
        order = shuffle_rng.permutation(n)
        for b_start in range(0, n, train_cfg.batch_size):
            idx = order[b_start:b_start + train_cfg.batch_size]
            images = np.ascontiguousarray(tr.images[idx])
            grad = np.zeros_like(params.vec)
            batch_loss = 0.0
            for cls in range(n_classes):
                logits, _, aligned, cache = forward_batch(params, images, cls)
                logits = np.asarray(logits)
                aligned = np.asarray(aligned)
                y = tr.labels[idx, cls].astype(np.float64)
                p = _stable_sigmoid(logits)
                ce = np.sum(np.maximum(logits, 0) - y * logits
                            + np.log1p(np.exp(-np.abs(logits))))
                batch_loss += ce / len(idx)
                d_logit = (p - y) / len(idx)
                d_aligned = np.zeros_like(aligned)

                if train_cfg.alignment_mode != "none":
                    contrib = np.flatnonzero(eligible[idx] & (tr.labels[idx, cls] == 1))
                    if contrib.size:
                        if train_cfg.alignment_mode == "human":
                            targets = human_targets[idx[contrib], cls]
                        else:
                            # one fresh shape per epoch, shared by all samples
                            rand_t = random_attention(
                                train_cfg.seed, epoch, (g, g)).ravel().astype(np.float64)
                            targets = np.broadcast_to(
                                rand_t, (contrib.size, n_tokens))
                        losses, grads_al = dice_fp_batch(targets, aligned[contrib],
                                                         train_cfg.dice)
                        batch_loss += float(losses.sum())
                        d_aligned[contrib] = grads_al
                model_mod.accumulate_backward(grad, params, cls, cache,
                                              d_logit, d_aligned)
            if not np.isfinite(batch_loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {b_start // train_cfg.batch_size}")
            adamw_step(params.vec, grad, state, train_cfg)

        epochs_trained = epoch + 1
        val_auc = macro_val_auc(params, data["val"])
        if val_auc > best_auc:
            best_auc = val_auc
            best_params = params.copy()
            best_epoch = epoch
        elif epoch - best_epoch >= train_cfg.patience:
            break

    result = RunResult(
        best_val_auc=float(best_auc),
        epochs_trained=epochs_trained,
        test_id=evaluate_split(best_params, data["test_id"]),
        test_ood=evaluate_split(best_params, data["test_ood"]),
        model_config=model_cfg.to_dict(),
        train_config=train_cfg.to_dict(),
    )
    return best_params, result


# ---------------------------------------------------------------------------
# Flattening and aggregation

def flatten_run(result: RunResult) -> dict[str, float | None]:
    """One flat metric dict per run. Overall metrics are fractions; fairness
    gaps carry a _pct suffix and are in percentage points."""
    flat: dict[str, float | None] = {
        "best_val_auc": result.best_val_auc,
        "epochs_trained": float(result.epochs_trained),
    }
    for split_name, rep in (("id", result.test_id), ("ood", result.test_ood)):
        for m in METRIC_NAMES:
            flat[f"{split_name}.{m}"] = getattr(rep.overall, m)
        for grouping, frep in (("sex", rep.by_sex), ("age", rep.by_age)):
            for m in METRIC_NAMES:
                gap = frep.gaps.get(m)
                flat[f"{split_name}.{m}_gap_{grouping}_pct"] = (
                    None if gap is None else 100.0 * gap)
    return flat


def _run_one(args):
    model_cfg, train_cfg, data = args
    _, result = train(model_cfg, train_cfg, data)
    return flatten_run(result), result.to_dict()


_WORKER_DATA = None


def _worker_init(model_cfg, data):
    global _WORKER_DATA
    _WORKER_DATA = (model_cfg, data)


def _worker_run(train_cfg):
    model_cfg, data = _WORKER_DATA
    return _run_one((model_cfg, train_cfg, data))


def _execute_runs(model_cfg, train_cfgs, data):
    workers = int(os.environ.get(WORKERS_ENV, "1") or "1")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(model_cfg, data)) as pool:
            return list(pool.map(_worker_run, train_cfgs))
    return [_run_one((model_cfg, cfg, data)) for cfg in train_cfgs]


def _aggregate_by_key(runs: list[tuple], keys: list) -> dict:
    """Group flattened runs by an experiment key and aggregate mean/std."""
    grouped: dict = {}
    for key, (flat, _) in zip(keys, runs):
        grouped.setdefault(key, []).append(flat)
    return {key: aggregate_runs(flats) for key, flats in grouped.items()}


# ---------------------------------------------------------------------------
# Sweeps

def sweep_alignment(model_cfg: ModelConfig, base_cfg: TrainConfig,
                    data: dict[str, SampleSet],
                    levels=ALIGNMENT_LEVELS, seeds=(0, 1)) -> dict:
    """Fairness/performance trade-off across alignment levels (mean±std per
    level over seeds)."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError("sweep needs >= 2 seeds for mean±std")
    cfgs, keys = [], []
    for level in levels:
        for seed in seeds:
            cfgs.append(replace(base_cfg, alignment_level=level,
                                alignment_mode="human" if level > 0 else "none",
                                seed=seed))
            keys.append(level)
    runs = _execute_runs(model_cfg, cfgs, data)
    agg = _aggregate_by_key(runs, keys)
    return {
        "kind": "alignment",
        "levels": {str(level): _agg_to_dict(agg[level]) for level in levels},
        "seeds": seeds,
        "runs": [{"level": k, "metrics": flat} for k, (flat, _) in zip(keys, runs)],
    }


def sweep_data_ratio(model_cfg: ModelConfig, base_cfg: TrainConfig,
                     data: dict[str, SampleSet],
                     ratios=DATA_RATIOS, seeds=(0, 1)) -> dict:
    """Paired aligned (level 100) vs baseline (level 0) arms per data ratio."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError("sweep needs >= 2 seeds for mean±std")
    cfgs, keys = [], []
    for ratio in ratios:
        for arm, (level, mode) in (("aligned", (100, "human")),
                                   ("baseline", (0, "none"))):
            for seed in seeds:
                cfgs.append(replace(base_cfg, data_ratio=ratio,
                                    alignment_level=level, alignment_mode=mode,
                                    seed=seed))
                keys.append((ratio, arm))
    runs = _execute_runs(model_cfg, cfgs, data)
    agg = _aggregate_by_key(runs, keys)
    return {
        "kind": "ratio",
        "cells": {f"{ratio}:{arm}": _agg_to_dict(agg[(ratio, arm)])
                  for (ratio, arm) in sorted(set(keys))},
        "seeds": seeds,
        "runs": [{"ratio": k[0], "arm": k[1], "metrics": flat}
                 for k, (flat, _) in zip(keys, runs)],
    }


def ablate_random(model_cfg: ModelConfig, base_cfg: TrainConfig,
                  data: dict[str, SampleSet], seeds=(0, 1)) -> dict:
    """Three-arm comparison: no alignment, human alignment, randomized
    alignment (both alignment arms at level 100), matched seeds."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError("ablation needs >= 2 seeds for mean±std")
    arms = {"none": (0, "none"), "human": (100, "human"), "random": (100, "random")}
    cfgs, keys = [], []
    for arm, (level, mode) in arms.items():
        for seed in seeds:
            cfgs.append(replace(base_cfg, alignment_level=level,
                                alignment_mode=mode, seed=seed))
            keys.append(arm)
    runs = _execute_runs(model_cfg, cfgs, data)
    agg = _aggregate_by_key(runs, keys)
    return {
        "kind": "ablation",
        "arms": {arm: _agg_to_dict(agg[arm]) for arm in arms},
        "seeds": seeds,
        "runs": [{"arm": k, "metrics": flat} for k, (flat, _) in zip(keys, runs)],
    }


def _agg_to_dict(agg: dict) -> dict:
    return {k: (None if v is None else {"mean": v[0], "std": v[1]})
            for k, v in agg.items()}


# ---------------------------------------------------------------------------
# Report output

def report_rows(report: dict) -> list[tuple]:
    """Canonical (key..., metric, mean, std) rows for report.csv."""
    rows = []
    if report["kind"] == "alignment":
        for level in sorted(report["levels"], key=int):
            for metric, v in sorted(report["levels"][level].items()):
                if v is not None:
                    rows.append((level, metric, v["mean"], v["std"]))
    elif report["kind"] == "ratio":
        for cell in sorted(report["cells"]):
            ratio, arm = cell.split(":")
            for metric, v in sorted(report["cells"][cell].items()):
                if v is not None:
                    rows.append((ratio, arm, metric, v["mean"], v["std"]))
    elif report["kind"] == "ablation":
        for arm in sorted(report["arms"]):
            for metric, v in sorted(report["arms"][arm].items()):
                if v is not None:
                    rows.append((arm, metric, v["mean"], v["std"]))
    else:
        raise ConfigError(f"unknown report kind {report['kind']!r}")
    return rows


CSV_HEADERS = {
    "alignment": ("level", "metric", "mean", "std"),
    "ratio": ("ratio", "arm", "metric", "mean", "std"),
    "ablation": ("arm", "metric", "mean", "std"),
}


def write_report(out_dir, config_echo: dict, report: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.json").write_text(json.dumps(config_echo, indent=2,
                                                     sort_keys=True))
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADERS[report["kind"]])
        for row in report_rows(report):
            writer.writerow([x if isinstance(x, str) else repr(x) if isinstance(x, float) else x
                             for x in row])
