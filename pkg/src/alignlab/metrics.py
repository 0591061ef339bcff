"""Evaluation metrics: AUC (tie-aware Mann-Whitney), thresholded
classification metrics, pointing-game hit rate, per-subgroup fairness
reports with best-minus-worst gaps, and mean/std aggregation across runs.

Undefined metrics are reported as absent (None), never coerced to 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, UndefinedMetricError

METRIC_NAMES = ("accuracy", "auc", "sensitivity", "f1", "hit_rate")


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a positive outscores a negative, ties counting 1/2.

    Computed from average ranks; matches the O(n+ * n-) pairwise count
    exactly, including the tie convention.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError(f"auc: scores {scores.shape} vs labels {labels.shape}")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"auc undefined: {n_pos} positives, {n_neg} negatives")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # average 1-based rank for the tie group [i, j]
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    rank_sum_pos = float(np.sum(ranks[labels == 1]))
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def threshold_metrics(scores, labels, threshold: float = 0.5):
    """(accuracy, sensitivity, f1) at a fixed threshold (pred = score >= t).

    sensitivity is None without positives; f1 is None when TP, FP and FN are
    all zero, and 0.0 when TP is zero but FP+FN > 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise DomainError("threshold_metrics: empty input")
    if scores.shape != labels.shape:
        raise DimensionError(f"threshold_metrics: {scores.shape} vs {labels.shape}")
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    accuracy = (tp + tn) / scores.size
    sensitivity = tp / (tp + fn) if (tp + fn) > 0 else None
    f1 = 2 * tp / (2 * tp + fp + fn) if (tp + fp + fn) > 0 else None
    return accuracy, sensitivity, f1


def hit(aligned_map: np.ndarray, mask: np.ndarray) -> bool:
    """True iff the argmax cell of the map (row-major, first on ties) lies
    inside the mask support."""
    aligned_map = np.asarray(aligned_map, dtype=np.float64)
    mask = np.asarray(mask)
    if aligned_map.shape != mask.shape:
        raise DimensionError(f"hit: map {aligned_map.shape} vs mask {mask.shape}")
    if not mask.any():
        raise DomainError("hit: empty mask")
    return bool(mask.ravel()[int(np.argmax(aligned_map))] != 0)


def hit_rate(pairs) -> float:
    """Fraction of (aligned_map, mask) pairs whose map peak falls in the mask."""
    pairs = list(pairs)
    if not pairs:
        raise DomainError("hit_rate: empty input")
    return sum(hit(m, y) for m, y in pairs) / len(pairs)


@dataclass
class MetricSet:
    accuracy: float | None
    auc: float | None
    sensitivity: float | None
    f1: float | None
    hit_rate: float | None
    n: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "auc": self.auc,
                "sensitivity": self.sensitivity, "f1": self.f1,
                "hit_rate": self.hit_rate, "n": self.n}


@dataclass
class FairnessReport:
    per_subgroup: dict[str, MetricSet]
    gaps: dict[str, float | None]            # best minus worst, fraction units
    excluded: dict[str, list[str]] = field(default_factory=dict)
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return {
            "per_subgroup": {g: m.to_dict() for g, m in self.per_subgroup.items()},
            "gaps": dict(self.gaps),
            "excluded": {k: list(v) for k, v in self.excluded.items()},
            "threshold": self.threshold,
        }


def _macro(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def subgroup_metrics(scores, labels, hits=None, threshold: float = 0.5) -> MetricSet:
    """Macro-averaged MetricSet over classes for one group of samples.

    scores/labels are (n, C); hits is an optional (n, C) float array with NaN
    where the hit criterion does not apply (negative label or no mask).
    Per-class metrics enter the macro average only where defined.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise DimensionError(f"subgroup_metrics: {scores.shape} vs {labels.shape}")
    n, n_classes = scores.shape
    accs, sens, f1s, aucs = [], [], [], []
    for c in range(n_classes):
        a, s, f = threshold_metrics(scores[:, c], labels[:, c], threshold)
        accs.append(a)
        sens.append(s)
        f1s.append(f)
        try:
            aucs.append(auc(scores[:, c], labels[:, c]))
        except UndefinedMetricError:
            aucs.append(None)
    hr = None
    if hits is not None:
        hits = np.asarray(hits, dtype=np.float64)
        applicable = ~np.isnan(hits)
        if applicable.any():
            hr = float(hits[applicable].mean())
    return MetricSet(accuracy=_macro(accs), auc=_macro(aucs),
                     sensitivity=_macro(sens), f1=_macro(f1s),
                     hit_rate=hr, n=n)


def fairness_report(scores, labels, group_ids, hits=None,
                    threshold: float = 0.5) -> FairnessReport:
    """Per-subgroup metrics plus best-minus-worst gaps.

    Subgroups with an undefined value for a metric are excluded from that
    metric's gap and flagged; a gap needs >= 2 contributing subgroups.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    group_ids = np.asarray(group_ids)
    if group_ids.shape[0] != scores.shape[0]:
        raise DimensionError(
            f"fairness_report: {group_ids.shape[0]} group ids for {scores.shape[0]} samples")
    groups = sorted(str(g) for g in set(group_ids.tolist()))
    if len(groups) < 2:
        raise UndefinedMetricError(
            f"fairness_report: need >= 2 subgroups, got {len(groups)}")
    per_subgroup = {}
    for g in groups:
        sel = np.asarray([str(x) == g for x in group_ids])
        per_subgroup[g] = subgroup_metrics(
            scores[sel], labels[sel],
            hits[sel] if hits is not None else None, threshold)
    gaps: dict[str, float | None] = {}
    excluded: dict[str, list[str]] = {}
    for m in METRIC_NAMES:
        values = {g: getattr(ms, m) for g, ms in per_subgroup.items()}
        missing = sorted(g for g, v in values.items() if v is None)
        present = [v for v in values.values() if v is not None]
        if missing:
            excluded[m] = missing
        gaps[m] = (max(present) - min(present)) if len(present) >= 2 else None
    return FairnessReport(per_subgroup=per_subgroup, gaps=gaps,
                          excluded=excluded, threshold=threshold)


def aggregate_runs(runs: list[dict]) -> dict[str, tuple[float, float]]:
    """Per-key mean and unbiased (n-1) std over >= 2 runs of flat float dicts.

    Keys must agree across runs; None values must be None in every run and
    aggregate to None.
    """
    if len(runs) < 2:
        raise UndefinedMetricError("aggregate_runs: need >= 2 runs for a std")
    keys = set(runs[0])
    for r in runs[1:]:
        if set(r) != keys:
            raise DimensionError(
                f"aggregate_runs: heterogeneous keys {sorted(keys ^ set(r))}")
    out = {}
    for k in sorted(keys):
        vals = [r[k] for r in runs]
        if any(v is None for v in vals):
            if not all(v is None for v in vals):
                raise DimensionError(f"aggregate_runs: key {k} defined in some runs only")
            out[k] = None
            continue
        arr = np.asarray(vals, dtype=np.float64)
        out[k] = (float(arr.mean()), float(arr.std(ddof=1)))
    return out


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"
