import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mann_whitney, rates, trapezoid
from pulmo.errors import DimensionError, UndefinedMetricError, UsageError
from pulmo.metrics import (
    ConfusionMatrix,
    MetricsReport,
    RocCurve,
    aggregate_folds,
    auc,
    average_roc,
    classification_metrics,
    confusion,
    dice_from_counts,
    iou_from_counts,
    make_fold_plan,
    roc_curve,
    segmentation_metrics,
    split_indices,
    write_metrics_csv,
)

counts = st.tuples(*(st.integers(0, 500) for _ in range(4))).filter(lambda c: sum(c) > 0)


class TestConfusion:
    def test_perfect(self):
        cm = confusion([0, 1, 1, 0], [0, 1, 1, 0])
        assert cm.fp == cm.fn == 0 and cm.total == 4

    def test_all_false_alarms(self):
        assert confusion([1] * 5, [0] * 5).fp == 5

    def test_reconstructed_segmented_counts(self):
        truths = [1] * 700 + [0] * 3500
        preds = [1] * 696 + [0] * 4 + [0] * 3500
        assert confusion(preds, truths) == ConfusionMatrix(696, 3500, 0, 4)

    def test_length_mismatch(self):
        with pytest.raises(UsageError):
            confusion([0, 1], [0])

    def test_negative_counts(self):
        with pytest.raises(UsageError):
            ConfusionMatrix(-1, 0, 0, 0)


class TestClassificationMetrics:
    def test_whole_image_counts(self):
        rep = classification_metrics(ConfusionMatrix(682, 3395, 105, 18))
        assert rep["accuracy"] == pytest.approx(4077 / 4200, abs=1e-12)
        assert rep["precision_tb"] == pytest.approx(682 / 787, abs=1e-12)
        assert rep["sensitivity_tb"] == pytest.approx(682 / 700, abs=1e-12)
        assert rep["precision_tb"] == pytest.approx(0.8666, abs=1e-4)
        assert rep["sensitivity_tb"] == pytest.approx(0.9743, abs=1e-4)

    def test_segmented_counts(self):
        rep = classification_metrics(ConfusionMatrix(696, 3500, 0, 4))
        assert rep["accuracy"] == pytest.approx(0.99905, abs=1e-5)
        assert rep["specificity_tb"] == 1.0 and rep["sensitivity_normal"] == 1.0

    @given(counts)
    def test_matches_count_oracle(self, c):
        rep = classification_metrics(ConfusionMatrix(*c))
        tp, tn, fp, fn = c
        pos, neg = rates(tp, tn, fp, fn), rates(tn, tp, fn, fp)
        for m in ("precision", "sensitivity", "specificity", "f1"):
            assert rep[f"{m}_tb"] == pytest.approx(pos[m], abs=1e-12)
            assert rep[f"{m}_normal"] == pytest.approx(neg[m], abs=1e-12)
            n_neg, n_pos = tn + fp, tp + fn
            weighted = (n_neg * neg[m] + n_pos * pos[m]) / (n_neg + n_pos)
            assert rep[m] == pytest.approx(weighted, abs=1e-12)
        assert all(0 <= v <= 1 for v in rep.values.values())

    @given(counts)
    def test_weighted_sensitivity_is_accuracy(self, c):
        rep = classification_metrics(ConfusionMatrix(*c))
        assert rep["sensitivity"] == pytest.approx(rep["accuracy"], abs=1e-12)

    def test_undefined_ratios_flagged(self):
        rep = classification_metrics(ConfusionMatrix(0, 5, 0, 3))
        assert rep["precision_tb"] == 0.0
        assert "precision_tb" in rep.undefined and "f1_tb" in rep.undefined

    def test_explicit_supports(self):
        rep = classification_metrics(ConfusionMatrix(5, 5, 0, 0), supports=(1, 3))
        assert rep["precision"] == 1.0

    def test_empty(self):
        with pytest.raises(UsageError):
            classification_metrics(ConfusionMatrix(0, 0, 0, 0))

    @given(counts)
    def test_f1_formula(self, c):
        rep = classification_metrics(ConfusionMatrix(*c))
        p, r = rep["precision_tb"], rep["sensitivity_tb"]
        if p + r:
            assert rep["f1_tb"] == pytest.approx(2 * p * r / (p + r), abs=1e-12)


class TestSegmentationMetrics:
    def test_identical(self):
        m = np.eye(4, dtype=bool)
        rep = segmentation_metrics(m, m)
        assert rep["iou"] == rep["dice"] == rep["accuracy"] == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        a[0, 0], b[1, 1] = True, True
        rep = segmentation_metrics(a, b)
        assert rep["iou"] == rep["dice"] == 0.0

    def test_set_count_example(self):
        pred, truth = np.zeros((4, 4), bool), np.zeros((4, 4), bool)
        pred[0, :3] = True
        truth[0, 1:3] = truth[1, 0:2] = True
        assert ((pred & truth).sum(), pred.sum(), truth.sum()) == (2, 3, 4)
        rep = segmentation_metrics(pred, truth)
        assert rep["iou"] == pytest.approx(0.4) and rep["dice"] == pytest.approx(4 / 7)

    def test_both_empty(self):
        z = np.zeros((3, 3), bool)
        rep = segmentation_metrics(z, z)
        assert rep["iou"] == rep["dice"] == 1.0

    def test_extent_mismatch(self):
        with pytest.raises(DimensionError):
            segmentation_metrics(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(counts)
    def test_dice_iou_identity(self, c):
        cm = ConfusionMatrix(*c)
        iou = iou_from_counts(cm)
        assert dice_from_counts(cm) == pytest.approx(2 * iou / (1 + iou), abs=1e-9)

    @settings(max_examples=30)
    @given(st.integers(0, 2**32 - 1))
    def test_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random(30) > 0.5, rng.random(30) > 0.5
        perm = rng.permutation(30)
        assert segmentation_metrics(a, b).values == segmentation_metrics(a[perm], b[perm]).values


class TestRoc:
    def test_separated(self):
        assert auc(roc_curve([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0

    def test_constant_scores(self):
        curve = roc_curve([0.5] * 6, [0, 1, 0, 1, 1, 0])
        assert curve.points == [(0.0, 0.0), (1.0, 1.0)]
        assert auc(curve) == 0.5

    def test_endpoints_and_monotone(self):
        rng = np.random.default_rng(0)
        curve = roc_curve(rng.random(20), np.arange(20) % 2)
        assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
        assert (np.diff(curve.fpr) >= 0).all() and (np.diff(curve.tpr) >= 0).all()

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            roc_curve([0.1, 0.2], [1, 1])

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=50))
    def test_mann_whitney(self, pairs):
        scores = [s / 6 for s, _ in pairs]
        truths = [t for _, t in pairs]
        if len(set(truths)) < 2:
            return
        assert auc(roc_curve(scores, truths)) == pytest.approx(mann_whitney(scores, truths), abs=1e-9)

    def test_single_curve_average(self):
        rng = np.random.default_rng(1)
        curve = roc_curve(rng.random(40), np.arange(40) % 2)
        avg = average_roc([curve])
        assert len(avg.fpr) == 101
        assert abs(auc(avg) - auc(curve)) <= 0.01

    def test_identical_curves(self):
        curve = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        a, b = average_roc([curve]), average_roc([curve, curve])
        np.testing.assert_array_equal(a.tpr, b.tpr)

    def test_step_curves_average(self):
        perfect = RocCurve(np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 1.0]))
        chance = RocCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
        assert (auc(perfect), auc(chance)) == (1.0, 0.5)
        avg = average_roc([perfect, chance])
        assert auc(avg) == pytest.approx(0.75, abs=0.01)
        assert trapezoid(avg.fpr.tolist(), avg.tpr.tolist()) == pytest.approx(auc(avg), abs=1e-12)

    def test_empty_average(self):
        with pytest.raises(UsageError):
            average_roc([])


class TestFoldPlan:
    @pytest.mark.parametrize(
        "n,train,val,tests",
        [(704, 451, 112, {141, 140}), (3500, 2240, 560, {700}), (700, 448, 112, {140})],
    )
    def test_table_counts(self, n, train, val, tests):
        plan = make_fold_plan([n], 5, seed=0)
        seen = set()
        for f in range(5):
            tr, va, te = plan.sizes(f)[0]
            assert te in tests
            assert va == math.floor(0.2 * (n - te))
            if te == max(tests):
                assert (tr, va) == (train, val)
            seen.add(te)
        assert [plan.sizes(f)[0][2] for f in range(5)] == sorted((plan.sizes(f)[0][2] for f in range(5)), reverse=True)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(5, 60), min_size=1, max_size=3), st.integers(2, 5), st.integers(0, 1000))
    def test_partition_properties(self, sizes, k, seed):
        plan = make_fold_plan(sizes, k, seed)
        for label, n in enumerate(sizes):
            tests = [plan.folds[f][label].test for f in range(k)]
            flat = [i for t in tests for i in t]
            assert sorted(flat) == list(range(n))
            assert max(map(len, tests)) - min(map(len, tests)) <= 1
            for f in range(k):
                s = plan.folds[f][label]
                assert set(s.train) | set(s.val) | set(s.test) == set(range(n))
                assert len(s.train) + len(s.val) + len(s.test) == n
                assert len(s.val) == math.floor(0.2 * (n - len(s.test)))
        again = make_fold_plan(sizes, k, seed)
        assert again.folds == plan.folds

    def test_class_smaller_than_k(self):
        with pytest.raises(UsageError):
            make_fold_plan([3], 5)

    def test_global_indices(self):
        plan = make_fold_plan({0: 10, 1: 5}, 5, seed=1)
        class_indices = {0: list(range(0, 20, 2)), 1: list(range(1, 10, 2))}
        split = split_indices(class_indices, plan, 0)
        assert len(split.test) == 3
        assert set(split.train) | set(split.val) | set(split.test) == set(range(0, 20, 2)) | set(range(1, 10, 2))


class TestAggregate:
    def test_identical(self):
        r = MetricsReport({"accuracy": 0.8, "dice": 0.7})
        agg = aggregate_folds([r, r, r])
        assert agg.mean == pytest.approx(r.values, abs=1e-12)
        assert agg.std == pytest.approx({"accuracy": 0.0, "dice": 0.0}, abs=1e-12)

    def test_two_points(self):
        agg = aggregate_folds([MetricsReport({"accuracy": 0.9}), MetricsReport({"accuracy": 1.0})])
        assert agg.mean["accuracy"] == pytest.approx(0.95) and agg.std["accuracy"] == pytest.approx(0.05)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.randoms())
    def test_permutation_invariance(self, vals, rnd):
        reps = [MetricsReport({"a": v}) for v in vals]
        shuffled = reps[:]
        rnd.shuffle(shuffled)
        a, b = aggregate_folds(reps), aggregate_folds(shuffled)
        assert a.mean["a"] == pytest.approx(b.mean["a"], abs=1e-12)
        assert a.std["a"] == pytest.approx(b.std["a"], abs=1e-12)

    def test_key_mismatch(self):
        with pytest.raises(UsageError):
            aggregate_folds([MetricsReport({"a": 1.0}), MetricsReport({"b": 1.0})])

    def test_csv_rows(self, tmp_path):
        reps = [MetricsReport({"accuracy": 0.9}), MetricsReport({"accuracy": 1.0})]
        path = write_metrics_csv(tmp_path / "m.csv", reps, aggregate_folds(reps))
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["fold", "accuracy"]
        assert [r[0] for r in rows[1:]] == ["0", "1", "mean", "std"]
        assert rows[-2][1] == "0.950000"
