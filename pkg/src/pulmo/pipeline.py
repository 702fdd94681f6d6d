"""Experiment orchestration: configs, k-fold segmentation and classification runs,
mask application, CAM audits and run reports.

The functions here work on in-memory datasets and an output directory; the CLI
is a thin wrapper that loads trees from disk and maps errors to exit codes.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .augment import STOCK_TRANSFORMS, balance_augment
from .data import CLASS_NAMES, Dataset, Sample, mask_batch, normalized_batch, prepare
from .errors import ConfigError, MissingArtifactError, UsageError
from .imageio import (
    DatasetStats,
    dataset_stats,
    keep_largest_components,
    to_uint8,
    write_pgm,
    zscore_denormalize,
    zscore_normalize,
)
from .metrics import (
    Aggregate,
    ConfusionMatrix,
    MetricsReport,
    RocCurve,
    aggregate_folds,
    auc,
    average_roc,
    classification_metrics,
    confusion,
    make_fold_plan,
    roc_curve,
    segmentation_metrics,
    split_indices,
    write_metrics_csv,
    write_report_json,
    write_roc_csv,
)
from .nn import ModelConfig, TrainSchedule, build_model
from .nn.training import evaluate, fit, forward_batches, predict_proba
from .optim import OptimizerConfig
from .scorecam import localization_score, score_cam, write_heatmap_pgm, write_overlay

log = logging.getLogger(__name__)

# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    task: str = "segmentation"
    data_root: str = ""
    output_dir: str = "runs/out"
    family: str = "unet"
    input_size: tuple[int, int] = (64, 64)
    base_channels: int = 8
    depth: int = 3
    epochs: int = 0  # 0 selects the task default
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    dropout: float = 0.2
    patience: int = 5
    k_folds: int = 5
    seed: int = 0
    segmentation_checkpoint: str = ""
    cam_layer: str = ""
    threshold: float = 0.5
    mask_components: int = 2
    augment_copies: int = 4
    test_root: str = ""

    def __post_init__(self):
        if self.task not in ("segmentation", "classification"):
            raise ConfigError(f"task must be segmentation or classification, got {self.task!r}")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if not 0 <= self.augment_copies <= len(STOCK_TRANSFORMS):
            raise ConfigError(f"augment_copies must lie in [0, {len(STOCK_TRANSFORMS)}]")
        self.model_config()
        self.schedule()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            task=self.task,
            family=self.family,
            input_size=self.input_size,
            base_channels=self.base_channels,
            depth=self.depth,
            dropout_rate=self.dropout,
        )

    def schedule(self, seed: int | None = None) -> TrainSchedule:
        epochs = self.epochs or (50 if self.task == "segmentation" else 15)
        return TrainSchedule(
            max_epochs=epochs,
            batch_size=self.batch_size,
            patience=min(self.patience, epochs),
            optimizer=OptimizerConfig(self.lr, self.momentum),
            seed=self.seed if seed is None else seed,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "input_size":
                v = f"{v[0]}x{v[1]}"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


CONFIG_KEYS = tuple(f.name for f in fields(PipelineConfig))


def _parse_value(key: str, raw: str):
    default = PipelineConfig.__dataclass_fields__[key].default
    raw = raw.strip()
    try:
        if key == "input_size":
            parts = raw.lower().replace(",", "x").split("x")
            dims = tuple(int(p) for p in parts if p)
            return dims * 2 if len(dims) == 1 else dims
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config_text(text: str) -> dict[str, object]:
    """Flat ``key=value`` lines; ``#`` starts a comment; later keys win."""
    out: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def resolve_config(path=None, overrides: dict[str, object] | None = None, **defaults) -> PipelineConfig:
    """Defaults, then the config file, then overrides (last writer wins)."""
    values: dict[str, object] = dict(defaults)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text()))
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, v) if isinstance(v, str) else v
    return PipelineConfig(**values)


def echo_config(config: PipelineConfig, out_dir, extra: dict[str, str] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = config.to_text() + "".join(f"{k}={v}\n" for k, v in (extra or {}).items())
    (out / "resolved_config.txt").write_text(text)
    return out / "resolved_config.txt"


def fold_threads() -> int:
    try:
        return max(1, int(os.environ.get("PULMO_THREADS", "1")))
    except ValueError:
        return 1


def _map_folds(fn: Callable[[int], object], k: int) -> list:
    threads = min(fold_threads(), k)
    if threads == 1:
        return [fn(i) for i in range(k)]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, range(k)))


def _stats_meta(stats: DatasetStats) -> dict:
    return {"mean": stats.mean, "std": stats.std}


def stats_from_meta(meta: dict) -> DatasetStats:
    norm = meta.get("meta", {}).get("normalization")
    if norm is None:
        raise MissingArtifactError("checkpoint sidecar has no normalization statistics")
    return DatasetStats(norm["mean"], norm["std"])


def write_manifest(out_dir, command: str, files: Sequence[str]) -> Path:
    """Record the artifacts a command produced so ``report`` can verify them."""
    return write_report_json(Path(out_dir) / "run_manifest.json", {"command": command, "files": sorted(files)})


def _check_plan(plan) -> None:
    """Fail before any training when a fold would have an empty train or validation split."""
    for i in range(plan.k):
        sizes = plan.sizes(i).values()
        if not sum(t for t, _, _ in sizes) or not sum(v for _, v, _ in sizes):
            raise UsageError(f"fold {i} has an empty train or validation split; add data or lower k_folds")


# -- segmentation -------------------------------------------------------------


@dataclass
class SegmentationRun:
    reports: list[MetricsReport]
    aggregate: Aggregate
    histories: list = field(default_factory=list)
    models: list = field(default_factory=list)
    stats: list[DatasetStats] = field(default_factory=list)


def _seg_fold_report(model, x: np.ndarray, y: np.ndarray, threshold: float) -> MetricsReport:
    loss, _ = evaluate(model, (x, y))
    prob = forward_batches(model, x)[:, 0]
    per = [segmentation_metrics(p >= threshold, t[0] >= 0.5) for p, t in zip(prob, y)]
    vals = {"loss": loss}
    for key in ("accuracy", "iou", "dice"):
        vals[key] = float(np.mean([r[key] for r in per]))
    return MetricsReport(vals)


def run_segmentation_cv(dataset: Dataset, config: PipelineConfig, out_dir=None) -> SegmentationRun:
    """k-fold U-Net training; test metrics are per-image means of accuracy, IoU and Dice."""
    data = prepare(dataset, config.input_size)
    plan = make_fold_plan({0: len(data)}, config.k_folds, config.seed)
    _check_plan(plan)
    model_cfg = config.model_config()
    out = Path(out_dir) if out_dir else None

    def one_fold(i: int):
        split = split_indices({0: list(range(len(data)))}, plan, i)
        train, val, test = (data.subset(idx) for idx in (split.train, split.val, split.test))
        stats = dataset_stats(s.image for s in train)
        xs = [normalized_batch(d, stats) for d in (train, val, test)]
        ys = [mask_batch(d) for d in (train, val, test)]
        seed = config.seed + i
        model = build_model(model_cfg, seed=seed)
        history = fit(model, (xs[0], ys[0]), (xs[1], ys[1]), config.schedule(seed))
        report = _seg_fold_report(model, xs[2], ys[2], config.threshold)
        log.info("fold %d: dice %.4f iou %.4f", i, report["dice"], report["iou"])
        if out is not None:
            checkpoint.save(model, out / f"fold{i}.ckpt", {"normalization": _stats_meta(stats), "fold": i})
        return report, history, model, stats

    results = _map_folds(one_fold, config.k_folds)
    reports = [r[0] for r in results]
    run = SegmentationRun(reports, aggregate_folds(reports), [r[1] for r in results], [r[2] for r in results], [r[3] for r in results])
    if out is not None:
        write_metrics_csv(out / "segmentation_metrics.csv", reports, run.aggregate)
        files = ["segmentation_metrics.csv", "resolved_config.txt"]
        files += [f"fold{i}.ckpt{s}" for i in range(config.k_folds) for s in ("", ".json")]
        write_manifest(out, "segment-train", files)
    return run


def predict_masks(model, stats: DatasetStats, images: Sequence[np.ndarray], threshold: float = 0.5, components: int = 2) -> list[np.ndarray]:
    x = np.stack([zscore_normalize(img, stats) for img in images])[:, None]
    prob = forward_batches(model, x)[:, 0]
    return [keep_largest_components(p >= threshold, components) for p in prob]


def segment_samples(dataset: Dataset, model, stats: DatasetStats, config: PipelineConfig, masks=None) -> Dataset:
    """Resize, normalize, predict a lung mask, zero the outside, render back to [0, 1].

    Returned samples carry the predicted mask; pass ``masks`` to force them.
    """
    data = prepare(dataset, config.input_size)
    if masks is None:
        masks = predict_masks(model, stats, [s.image for s in data], config.threshold, config.mask_components)
    out = []
    for s, m in zip(data, masks):
        z = np.where(m, zscore_normalize(s.image, stats), np.float32(0))
        out.append(replace(s, image=np.clip(zscore_denormalize(z, stats), 0.0, 1.0), mask=np.asarray(m, bool)))
    return Dataset(out, dataset.layout)


def write_segmented_tree(source: Dataset, segmented: Dataset, out_dir, truth_root=None) -> list[str]:
    """Mirror the classification tree: ``<class>/`` segmented images, ``pred_masks/<class>/``
    predicted masks, and ``lung_masks/`` copied from ``truth_root`` when present."""
    out = Path(out_dir)
    files = []
    for src, seg in zip(source, segmented):
        cls, name = src.id.split("/", 1)
        write_pgm(to_uint8(seg.image), out / cls / f"{name}.pgm")
        write_pgm(seg.mask, out / "pred_masks" / cls / f"{name}.pgm")
        files += [f"{cls}/{name}.pgm", f"pred_masks/{cls}/{name}.pgm"]
    if truth_root is not None and (Path(truth_root) / "lung_masks").is_dir():
        shutil.copytree(Path(truth_root) / "lung_masks", out / "lung_masks", dirs_exist_ok=True)
    return files


# -- classification -------------------------------------------------------------


@dataclass
class ClassificationFold:
    report: MetricsReport
    cm: ConfusionMatrix
    roc: RocCurve
    ids: list[str]
    labels: np.ndarray
    probs: np.ndarray
    model: object
    stats: DatasetStats
    history: object


@dataclass
class ClassificationRun:
    folds: list[ClassificationFold]
    aggregate: Aggregate
    summed: ConfusionMatrix
    mean_roc: RocCurve

    @property
    def reports(self) -> list[MetricsReport]:
        return [f.report for f in self.folds]


def balance_copies(train: Dataset, max_copies: int) -> tuple[int, int]:
    """(minority label, copies) so the minority roughly matches the majority; copies 0 if balanced."""
    counts = {label: len(idx) for label, idx in train.class_indices().items()}
    if len(counts) < 2 or max_copies == 0:
        return 1, 0
    minority = min(counts, key=lambda k: (counts[k], -k))
    majority = max(counts.values())
    copies = int(np.floor(majority / counts[minority] + 0.5)) - 1
    return minority, max(0, min(max_copies, copies))


def _inputs(data: Dataset, stats: DatasetStats, input_kind: str) -> np.ndarray:
    return normalized_batch(data, stats, mask_input=input_kind == "segmented")


def train_classifier(train: Dataset, val: Dataset, config: PipelineConfig, input_kind: str, seed: int):
    """Augment (training only), normalize with training statistics, fit. Returns (model, stats, history)."""
    minority, copies = balance_copies(train, config.augment_copies)
    if copies:
        train = balance_augment(train, minority, copies, seed)
    stats = dataset_stats(s.image for s in train)
    model = build_model(config.model_config(), seed=seed)
    history = fit(
        model,
        (_inputs(train, stats, input_kind), train.labels),
        (_inputs(val, stats, input_kind), val.labels),
        config.schedule(seed),
    )
    return model, stats, history


def evaluate_classifier(model, stats: DatasetStats, test: Dataset, input_kind: str):
    probs = predict_proba(model, _inputs(test, stats, input_kind))
    labels = test.labels
    cm = confusion(probs.argmax(axis=1), labels, 1)
    return classification_metrics(cm), cm, roc_curve(probs[:, 1], labels), probs


def holdout_split(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Per class, floor(20%) of a seeded shuffle goes to validation."""
    train, val = [], []
    for label, idx in dataset.class_indices().items():
        order = np.random.default_rng([seed, label]).permutation(len(idx))
        n_val = int(np.floor(0.2 * len(idx)))
        val += [idx[j] for j in order[:n_val]]
        train += [idx[j] for j in order[n_val:]]
    return dataset.subset(sorted(train)), dataset.subset(sorted(val))


def run_classification_cv(
    dataset: Dataset, config: PipelineConfig, input_kind: str = "whole", test_dataset: Dataset | None = None, out_dir=None
) -> ClassificationRun:
    """Stratified k-fold classification (or one hold-out run when ``test_dataset`` is given)."""
    if input_kind not in ("whole", "segmented"):
        raise UsageError(f"input kind must be whole or segmented, got {input_kind!r}")
    data = prepare(dataset, config.input_size)
    if input_kind == "segmented" and any(s.mask is None for s in data):
        raise UsageError("segmented input needs a mask for every image")
    classes = data.class_indices()
    plan = make_fold_plan({c: len(v) for c, v in classes.items()}, config.k_folds, config.seed)
    if test_dataset is None:
        _check_plan(plan)

    def one_fold(i: int) -> ClassificationFold:
        seed = config.seed + i
        if test_dataset is None:
            split = split_indices(classes, plan, i)
            train, val, test = (data.subset(idx) for idx in (split.train, split.val, split.test))
        else:
            train, val = holdout_split(data, seed)
            test = prepare(test_dataset, config.input_size)
        model, stats, history = train_classifier(train, val, config, input_kind, seed)
        report, cm, roc, probs = evaluate_classifier(model, stats, test, input_kind)
        log.info("fold %d: accuracy %.4f auc %.4f", i, report["accuracy"], auc(roc))
        return ClassificationFold(report, cm, roc, [s.id for s in test], test.labels, probs, model, stats, history)

    folds = _map_folds(one_fold, 1 if test_dataset is not None else config.k_folds)
    summed = ConfusionMatrix(*(sum(getattr(f.cm, k) for f in folds) for k in ("tp", "tn", "fp", "fn")))
    run = ClassificationRun(folds, aggregate_folds([f.report for f in folds]), summed, average_roc([f.roc for f in folds]))
    if out_dir is not None:
        _write_classification(run, config, input_kind, Path(out_dir))
    return run


TABLE_COLUMNS = ("accuracy", "precision", "sensitivity", "f1", "specificity")


def _write_classification(run: ClassificationRun, config: PipelineConfig, input_kind: str, out: Path) -> None:
    files = ["resolved_config.txt", "classification_metrics.csv", "metrics_full.csv", "roc.csv", "confusion.csv", "predictions.csv", "report.json"]
    table = [MetricsReport({k: r[k] for k in TABLE_COLUMNS}) for r in run.reports]
    write_metrics_csv(out / "classification_metrics.csv", table, aggregate_folds(table))
    write_metrics_csv(out / "metrics_full.csv", run.reports, run.aggregate)
    write_roc_csv(out / "roc.csv", run.mean_roc)
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "tp", "tn", "fp", "fn"])
        for i, f in enumerate(run.folds):
            w.writerow([i, f.cm.tp, f.cm.tn, f.cm.fp, f.cm.fn])
        s = run.summed
        w.writerow(["sum", s.tp, s.tn, s.fp, s.fn])
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "id", "label", "prob_tb", "pred"])
        for i, f in enumerate(run.folds):
            for sid, label, p in zip(f.ids, f.labels, f.probs):
                w.writerow([i, sid, int(label), f"{p[1]:.6f}", int(p.argmax())])
    for i, f in enumerate(run.folds):
        checkpoint.save(f.model, out / f"fold{i}.ckpt", {"normalization": _stats_meta(f.stats), "fold": i, "input": input_kind})
        files += [f"fold{i}.ckpt", f"fold{i}.ckpt.json"]
    write_report_json(
        out / "report.json",
        {
            "input": input_kind,
            "folds": [r.to_dict() for r in run.reports],
            "mean": run.aggregate.mean,
            "std": run.aggregate.std,
            "summed_confusion": asdict(run.summed),
            "mean_auc": auc(run.mean_roc),
        },
    )
    write_manifest(out, "classify", files)


# -- CAM audit ------------------------------------------------------------------


@dataclass
class CamRow:
    id: str
    label: int
    pred: int
    target: int
    localization: float | None


def cam_audit(
    model,
    stats: DatasetStats,
    samples: Sequence[Sample],
    input_kind: str,
    layer_id: str | None = None,
    out_dir=None,
    truth_masks: dict[str, np.ndarray] | None = None,
    misclassified_only: bool = False,
) -> list[CamRow]:
    """Score-CAM for each sample on its predicted class, with optional overlays and
    localization against ``truth_masks`` (keyed by sample id)."""
    rows = []
    data = prepare(Dataset(list(samples)), model.config.input_size)
    x = _inputs(data, stats, input_kind)
    preds = predict_proba(model, x).argmax(axis=1)
    for s, xi, pred in zip(data, x, preds):
        if misclassified_only and s.label == pred:
            continue
        hm = score_cam(model, xi, layer_id or None, int(pred))
        loc = None
        if truth_masks is not None:
            if s.id not in truth_masks:
                raise UsageError(f"no lung mask for {s.id}")
            loc = localization_score(hm, truth_masks[s.id])
        if out_dir is not None:
            stem = s.id.replace("/", "_")
            write_overlay(Path(out_dir) / "overlays" / f"{stem}.ppm", hm, to_uint8(s.image))
            write_heatmap_pgm(Path(out_dir) / "heatmaps" / f"{stem}.pgm", hm)
        rows.append(CamRow(s.id, int(s.label), int(pred), int(pred), loc))
    return rows


def write_cam_csv(path, rows: Sequence[CamRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "pred", "target", "localization"])
        for r in rows:
            w.writerow([r.id, r.label, r.pred, r.target, "" if r.localization is None else f"{r.localization:.6f}"])
    return path


# -- report ---------------------------------------------------------------------


def run_report(run_dir) -> tuple[str, list[str]]:
    """Summary text for every run directory below ``run_dir`` and the list of missing artifacts."""
    root = Path(run_dir)
    manifests = sorted(root.rglob("run_manifest.json"))
    if not manifests:
        return "", [str(root / "run_manifest.json")]
    lines, missing = [], []
    for mpath in manifests:
        run = mpath.parent
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError:
            missing.append(f"{mpath} (corrupt)")
            continue
        gone = [str(run / f) for f in manifest["files"] if not (run / f).is_file()]
        missing += gone
        rel = run.relative_to(root).as_posix() or "."
        lines.append(f"[{rel}] {manifest['command']}")
        for name in ("segmentation_metrics.csv", "classification_metrics.csv"):
            p = run / name
            if p.is_file():
                with open(p, newline="") as fh:
                    rows = list(csv.reader(fh))
                header = rows[0][1:]
                for row in rows[1:]:
                    if row[0] in ("mean", "std"):
                        lines.append(f"  {row[0]:<5} " + "  ".join(f"{h}={v}" for h, v in zip(header, row[1:])))
        cpath = run / "confusion.csv"
        if cpath.is_file():
            with open(cpath, newline="") as fh:
                last = list(csv.reader(fh))[-1]
            lines.append(f"  summed confusion tp={last[1]} tn={last[2]} fp={last[3]} fn={last[4]}")
    return "\n".join(lines) + "\n", missing
