import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alignlab.errors import (DimensionError, DomainError, UndefinedMetricError)
from alignlab import metrics
from alignlab.metrics import (aggregate_runs, auc, fairness_report,
                              format_mean_std, hit, hit_rate,
                              subgroup_metrics, threshold_metrics)


def auc_bruteforce(scores, labels):
    """Independent O(n+ * n-) pairwise oracle, tie = 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            total += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_one_winning_one_losing_pair(self):
        assert auc([0.8, 0.2, 0.5], [1, 1, 0]) == 0.5

    def test_tie_convention(self):
        assert auc([0.5, 0.5], [1, 0]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_bruteforce_exactly(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 201))
        # quantized scores force plenty of ties
        scores = np.round(rng.random(n), 2)
        labels = (rng.random(n) < 0.4).astype(int)
        if labels.sum() == 0:
            labels[0] = 1
        if labels.sum() == n:
            labels[0] = 0
        assert auc(scores, labels) == auc_bruteforce(scores, labels)

    @pytest.mark.parametrize("seed", range(20))
    def test_invariant_under_monotone_transform(self, seed):
        rng = np.random.default_rng(300 + seed)
        scores = rng.normal(size=50)
        labels = np.r_[np.ones(20), np.zeros(30)].astype(int)
        a = auc(scores, labels)
        assert auc(np.exp(scores), labels) == pytest.approx(a, abs=1e-12)
        assert auc(3 * scores + 7, labels) == pytest.approx(a, abs=1e-12)


class TestThresholdMetrics:
    def test_confusion_arithmetic(self):
        # TP=1, FP=1, FN=0, TN=0
        acc, sens, f1 = threshold_metrics([0.9, 0.8], [1, 0])
        assert acc == 0.5 and sens == 1.0 and f1 == pytest.approx(2 / 3)

    def test_all_correct(self):
        acc, sens, f1 = threshold_metrics([0.9, 0.1], [1, 0])
        assert acc == 1.0 and f1 == 1.0

    def test_no_positives_gives_absent_sensitivity(self):
        acc, sens, f1 = threshold_metrics([0.1, 0.2], [0, 0])
        assert sens is None and f1 is None

    def test_f1_zero_when_tp_zero_but_errors_exist(self):
        _, _, f1 = threshold_metrics([0.9], [0])
        assert f1 == 0.0

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            threshold_metrics([], [])


class TestHitRate:
    def test_peak_inside_mask_hits(self):
        m = np.zeros((3, 3))
        m[1, 1] = 5.0
        mask = np.zeros((3, 3), dtype=int)
        mask[1, 1] = 1
        assert hit(m, mask)

    def test_uniform_map_row_major_tiebreak(self):
        mask = np.zeros((3, 3), dtype=int)
        mask[0, 0] = 1
        assert hit(np.ones((3, 3)), mask)

    def test_counting(self):
        mask = np.array([[1, 0], [0, 0]])
        peak_in = np.array([[9.0, 0], [0, 0]])
        peak_out = np.array([[0, 9.0], [0, 0]])
        assert hit_rate([(peak_in, mask)] + [(peak_out, mask)] * 3) == 0.25

    def test_empty_list_rejected(self):
        with pytest.raises(DomainError):
            hit_rate([])

    def test_empty_mask_rejected(self):
        with pytest.raises(DomainError):
            hit(np.ones((2, 2)), np.zeros((2, 2), dtype=int))

    @pytest.mark.parametrize("seed", range(20))
    def test_invariant_under_monotone_map_transform(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.random((4, 4))
        mask = (rng.random((4, 4)) < 0.3).astype(int)
        mask[2, 2] = 1
        assert hit(m, mask) == hit(np.exp(5 * m), mask)


def _random_instance(rng, n_groups=2):
    n = int(rng.integers(20, 60))
    scores = rng.random((n, 2))
    labels = (rng.random((n, 2)) < 0.5).astype(int)
    # guarantee both classes per group per label column
    groups = np.array([f"g{i % n_groups}" for i in range(n)])
    for g in set(groups):
        sel = np.flatnonzero(groups == g)
        labels[sel[0], :] = 1
        labels[sel[1], :] = 0
    return scores, labels, groups


class TestFairnessReport:
    def test_gap_is_max_minus_min(self):
        rep = fairness_report(
            np.array([[0.9], [0.1], [0.6], [0.4]]),
            np.array([[1], [0], [1], [0]]),
            np.array(["a", "a", "b", "b"]))
        assert rep.gaps["auc"] == pytest.approx(0.0)  # both perfect
        assert rep.per_subgroup["a"].auc == 1.0

    def test_identical_predictions_zero_gaps(self):
        scores = np.array([[0.9], [0.1]])
        labels = np.array([[1], [0]])
        rep = fairness_report(np.vstack([scores, scores]),
                              np.vstack([labels, labels]),
                              np.array(["a", "a", "b", "b"]))
        for m, v in rep.gaps.items():
            if v is not None:
                assert v == 0.0

    def test_three_groups_middle_ignored(self):
        scores, labels = [], []
        # craft groups with AUC 1.0, 0.5 (tie), 0.0
        per_group = {
            "g_best": ([0.9, 0.1], [1, 0]),
            "g_mid": ([0.5, 0.5], [1, 0]),
            "g_worst": ([0.1, 0.9], [1, 0]),
        }
        groups = []
        for g, (s, l) in per_group.items():
            scores += s
            labels += l
            groups += [g, g]
        rep = fairness_report(np.array(scores)[:, None],
                              np.array(labels)[:, None], np.array(groups))
        assert rep.gaps["auc"] == pytest.approx(1.0)

    def test_fewer_than_two_subgroups_rejected(self):
        with pytest.raises(UndefinedMetricError):
            fairness_report(np.array([[0.9], [0.1]]), np.array([[1], [0]]),
                            np.array(["a", "a"]))

    def test_undefined_subgroup_excluded_and_flagged(self):
        # group b has no negatives -> AUC undefined there
        rep = fairness_report(
            np.array([[0.9], [0.1], [0.6], [0.7], [0.2], [0.8]]),
            np.array([[1], [0], [1], [1], [0], [1]]),
            np.array(["a", "a", "b", "b", "a", "a"]))
        assert "b" in rep.excluded["auc"]
        assert rep.gaps["auc"] is None  # only one valid subgroup remains

    @pytest.mark.parametrize("seed", range(200))
    def test_axioms(self, seed):
        rng = np.random.default_rng(seed)
        scores, labels, groups = _random_instance(rng)
        rep = fairness_report(scores, labels, groups)
        for m, v in rep.gaps.items():
            if v is not None:
                assert v >= 0.0
        # relabeling invariance
        swapped = np.where(groups == "g0", "zz", "aa")
        rep2 = fairness_report(scores, labels, swapped)
        for m in rep.gaps:
            if rep.gaps[m] is None:
                assert rep2.gaps[m] is None
            else:
                assert rep2.gaps[m] == pytest.approx(rep.gaps[m], abs=1e-12)


class TestAggregateRuns:
    def test_two_point_std(self):
        agg = aggregate_runs([{"x": 0.1}, {"x": 0.3}])
        mean, std = agg["x"]
        assert mean == pytest.approx(0.2)
        assert std == pytest.approx(0.1414, abs=1e-4)

    def test_identical_runs_zero_std(self):
        agg = aggregate_runs([{"x": 0.5}] * 3)
        assert agg["x"] == (0.5, 0.0)

    def test_single_run_rejected(self):
        with pytest.raises(UndefinedMetricError):
            aggregate_runs([{"x": 1.0}])

    def test_heterogeneous_keys_rejected(self):
        with pytest.raises(DimensionError):
            aggregate_runs([{"x": 1.0}, {"y": 1.0}])

    def test_none_propagates(self):
        agg = aggregate_runs([{"x": None}, {"x": None}])
        assert agg["x"] is None

    def test_table_style_formatting(self):
        assert format_mean_std(3.2, 0.19) == "3.20 ± 0.19"


def test_subgroup_metrics_macro_and_hits():
    scores = np.array([[0.9, 0.2], [0.1, 0.8], [0.7, 0.6]])
    labels = np.array([[1, 0], [0, 1], [1, 1]])
    hits = np.array([[1.0, np.nan], [np.nan, 0.0], [1.0, 1.0]])
    ms = subgroup_metrics(scores, labels, hits)
    assert ms.n == 3
    assert ms.hit_rate == pytest.approx(0.75)
    assert ms.auc == pytest.approx(1.0)
