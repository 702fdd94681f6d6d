"""Confusion counts, classification and overlap metrics, ROC/AUC, fold plans."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, UndefinedMetricError, UsageError
from .synth import SplitMix64, derive_seed

CLASS_METRICS = ("precision", "sensitivity", "specificity", "f1")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise UsageError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self) -> "ConfusionMatrix":
        """The same counts seen with the other class as positive."""
        return ConfusionMatrix(self.tn, self.tp, self.fn, self.fp)


def confusion(predictions, truths, positive_label=1) -> ConfusionMatrix:
    p = np.asarray(predictions).ravel()
    t = np.asarray(truths).ravel()
    if p.shape != t.shape:
        raise UsageError(f"{p.size} predictions vs {t.size} truths")
    pp, tp_ = p == positive_label, t == positive_label
    return ConfusionMatrix(
        int((pp & tp_).sum()), int((~pp & ~tp_).sum()), int((pp & ~tp_).sum()), int((~pp & tp_).sum())
    )


def _ratio(num: float, den: float, key: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(key)
        return 0.0
    return num / den


def iou_from_counts(cm: ConfusionMatrix) -> float:
    den = cm.tp + cm.fp + cm.fn
    return 1.0 if den == 0 else cm.tp / den


def dice_from_counts(cm: ConfusionMatrix) -> float:
    den = 2 * cm.tp + cm.fp + cm.fn
    return 1.0 if den == 0 else 2 * cm.tp / den


@dataclass
class MetricsReport:
    """Flat metric mapping.

    Classification keys: ``accuracy``, ``<metric>_<class>`` per class and the
    support-weighted ``<metric>``. Segmentation keys: ``accuracy``, ``iou``,
    ``dice``. ``undefined`` lists keys whose ratio was 0/0 (reported as 0).
    """

    values: dict[str, float]
    undefined: list[str] = field(default_factory=list)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def keys(self):
        return self.values.keys()

    def to_dict(self) -> dict:
        return {"values": dict(self.values), "undefined": list(self.undefined)}


def _per_class(cm: ConfusionMatrix, name: str, undefined: list[str]) -> dict[str, float]:
    prec = _ratio(cm.tp, cm.tp + cm.fp, f"precision_{name}", undefined)
    sens = _ratio(cm.tp, cm.tp + cm.fn, f"sensitivity_{name}", undefined)
    spec = _ratio(cm.tn, cm.tn + cm.fp, f"specificity_{name}", undefined)
    f1 = _ratio(2 * prec * sens, prec + sens, f"f1_{name}", undefined)
    return {"precision": prec, "sensitivity": sens, "specificity": spec, "f1": f1}


def classification_metrics(
    cm: ConfusionMatrix, supports: Sequence[int] | None = None, class_names: Sequence[str] = ("normal", "tb")
) -> MetricsReport:
    """Accuracy plus per-class and support-weighted precision, sensitivity, specificity, F1.

    ``cm`` has the second class as positive; the first class's values come from
    the swapped counts. ``supports`` default to the true counts of each class.
    """
    if cm.total == 0:
        raise UsageError("classification_metrics needs a non-empty confusion matrix")
    neg, pos = class_names
    if supports is None:
        supports = (cm.tn + cm.fp, cm.tp + cm.fn)
    undefined: list[str] = []
    values = {"accuracy": (cm.tp + cm.tn) / cm.total}
    per = {neg: _per_class(cm.swapped(), neg, undefined), pos: _per_class(cm, pos, undefined)}
    for name, d in per.items():
        for m, v in d.items():
            values[f"{m}_{name}"] = v
    wsum = sum(supports)
    for m in CLASS_METRICS:
        values[m] = (supports[0] * per[neg][m] + supports[1] * per[pos][m]) / wsum if wsum else 0.0
    return MetricsReport(values, undefined)


def segmentation_metrics(pred: np.ndarray, truth: np.ndarray) -> MetricsReport:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    if pred.shape != truth.shape:
        raise DimensionError(f"mask extents differ: {pred.shape} vs {truth.shape}")
    cm = confusion(pred, truth, True)
    return MetricsReport(
        {"accuracy": (cm.tp + cm.tn) / cm.total, "iou": iou_from_counts(cm), "dice": dice_from_counts(cm)}
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray | None = None

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores, truths, positive_label=1) -> RocCurve:
    """One point per distinct score (descending, ``score >= t`` is positive) plus (0,0)."""
    s = np.asarray(scores, np.float64).ravel()
    t = np.asarray(truths).ravel() == positive_label
    if s.shape != t.shape:
        raise UsageError(f"{s.size} scores vs {t.size} truths")
    npos, nneg = int(t.sum()), int((~t).sum())
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(t)[last]
    fps = np.cumsum(~t)[last]
    fpr = np.r_[0.0, fps / nneg]
    tpr = np.r_[0.0, tps / npos]
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]])


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    x, y = np.asarray(curve.fpr, np.float64), np.asarray(curve.tpr, np.float64)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2))


def _tpr_on_grid(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    x, y = np.asarray(curve.fpr, np.float64), np.asarray(curve.tpr, np.float64)
    xs = np.unique(x)
    lo = np.array([y[x == v].min() for v in xs])
    hi = np.array([y[x == v].max() for v in xs])
    out = np.empty_like(grid)
    for i, g in enumerate(grid):
        j = np.searchsorted(xs, g)
        if j < len(xs) and xs[j] == g:
            out[i] = hi[j]  # on a vertical segment take its top
        elif j == 0:
            out[i] = lo[0]
        elif j == len(xs):
            out[i] = hi[-1]
        else:
            a = (g - xs[j - 1]) / (xs[j] - xs[j - 1])
            out[i] = hi[j - 1] + a * (lo[j] - hi[j - 1])
    return out


def average_roc(curves: Sequence[RocCurve], points: int = 101) -> RocCurve:
    """Vertical averaging: mean TPR at equally spaced FPR values."""
    if not curves:
        raise UsageError("average_roc needs at least one curve")
    grid = np.linspace(0.0, 1.0, points)
    return RocCurve(grid, np.mean([_tpr_on_grid(c, grid) for c in curves], axis=0))


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


@dataclass
class FoldPlan:
    """Per fold, per class label: indices local to that class (0..n_class-1)."""

    k: int
    seed: int
    class_sizes: dict[int, int]
    folds: list[dict[int, Split]]

    def sizes(self, fold: int) -> dict[int, tuple[int, int, int]]:
        return {c: (len(s.train), len(s.val), len(s.test)) for c, s in self.folds[fold].items()}


def _shuffled(n: int, seed: int) -> list[int]:
    rng = SplitMix64(seed)
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.integer(0, i)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def make_fold_plan(class_sizes: Mapping[int, int] | Sequence[int], k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified k-fold plan.

    Per class: seeded shuffle, k contiguous test folds (larger folds first),
    validation = floor(0.2 * non-test) taken from the items following the test
    fold (cyclically), train = the rest.
    """
    if k < 2:
        raise UsageError(f"k must be >= 2, got {k}")
    sizes = dict(enumerate(class_sizes)) if not isinstance(class_sizes, Mapping) else dict(class_sizes)
    folds: list[dict[int, Split]] = [{} for _ in range(k)]
    for label, n in sizes.items():
        if n < k:
            raise UsageError(f"class {label} has {n} samples, fewer than k={k}")
        order = _shuffled(n, derive_seed(seed, label))
        fold_sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
        start = 0
        for i, size in enumerate(fold_sizes):
            test = order[start : start + size]
            rest = order[start + size :] + order[:start]
            n_val = math.floor(0.2 * len(rest))
            folds[i][label] = Split(tuple(rest[n_val:]), tuple(rest[:n_val]), tuple(test))
            start += size
    return FoldPlan(k, seed, sizes, folds)


def split_indices(class_indices: Mapping[int, Sequence[int]], plan: FoldPlan, fold: int) -> Split:
    """Map a plan's per-class local indices to global dataset indices."""
    parts = {"train": [], "val": [], "test": []}
    for label, split in plan.folds[fold].items():
        glob = class_indices[label]
        for part in parts:
            parts[part].extend(glob[i] for i in getattr(split, part))
    return Split(*(tuple(sorted(parts[p])) for p in ("train", "val", "test")))


@dataclass
class Aggregate:
    mean: dict[str, float]
    std: dict[str, float]
    n: int


def aggregate_folds(reports: Sequence[MetricsReport]) -> Aggregate:
    """Per-metric mean and population standard deviation across folds."""
    if not reports:
        raise UsageError("aggregate_folds needs at least one report")
    keys = set(reports[0].keys())
    for r in reports[1:]:
        if set(r.keys()) != keys:
            raise UsageError(f"metric keys differ across folds: {sorted(keys ^ set(r.keys()))}")
    ordered = list(reports[0].keys())
    arr = {k: np.array([r[k] for r in reports], np.float64) for k in ordered}
    return Aggregate({k: float(v.mean()) for k, v in arr.items()}, {k: float(v.std()) for k, v in arr.items()}, len(reports))


def write_metrics_csv(path, reports: Sequence[MetricsReport], aggregate: Aggregate | None = None) -> Path:
    """One row per fold, then ``mean`` and ``std`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(reports[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", *keys])
        for i, r in enumerate(reports):
            w.writerow([i, *(f"{r[k]:.6f}" for k in keys)])
        if aggregate is not None:
            w.writerow(["mean", *(f"{aggregate.mean[k]:.6f}" for k in keys)])
            w.writerow(["std", *(f"{aggregate.std[k]:.6f}" for k in keys)])
    return path


def write_report_json(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_roc_csv(path, curve: RocCurve) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for x, y in zip(curve.fpr, curve.tpr):
            w.writerow([f"{x:.6f}", f"{y:.6f}"])
    return path
