"""Command-line entry point: ``pulmo <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence, 5 missing artifact.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint, pipeline
from .data import load_dataset
from .errors import ConfigError, MissingArtifactError, PulmoError, UsageError
from .synth import SynthConfig, gen_dataset

log = logging.getLogger("pulmo")

COMMAND_DEFAULTS = {
    "segment-train": {"task": "segmentation", "family": "unet"},
    "segment-apply": {"task": "segmentation", "family": "unet"},
    "classify": {"task": "classification", "family": "resnet_mini"},
    "cam": {"task": "classification", "family": "resnet_mini"},
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    for key in pipeline.CONFIG_KEYS:
        flag = "--" + key.replace("_", "-")
        names = [flag, "--model"] if key == "family" else [flag]
        p.add_argument(*names, dest=key, default=None, metavar=key.upper())
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra override, repeatable")


def _config(args, command: str) -> pipeline.PipelineConfig:
    overrides = {k: getattr(args, k) for k in pipeline.CONFIG_KEYS}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip().replace("-", "_")] = v
    return pipeline.resolve_config(args.config, overrides, **COMMAND_DEFAULTS[command])


def _require_dir(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is not set")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} does not exist: {p}")
    return p


def cmd_synth(args) -> int:
    lo, hi = (int(v) for v in args.lesion_count.split(","))
    cfg = SynthConfig(
        image_size=(args.image_size, args.image_size),
        n_per_class=args.n_per_class,
        lesion_count_range=(lo, hi),
        lesion_intensity=args.lesion_intensity,
        noise_std=args.noise_std,
        spurious_cue=args.spurious_cue,
        seed=args.seed,
    )
    root = gen_dataset(cfg, args.out)
    print(f"wrote {2 * cfg.n_per_class} images and masks to {root}")
    print(f"manifest: {root / 'manifest.csv'} (spurious_cue={cfg.spurious_cue}, seed={cfg.seed})")
    return 0


def cmd_segment_train(args) -> int:
    cfg = _config(args, "segment-train")
    data_root = _require_dir(cfg.data_root, "data_root")
    out = Path(cfg.output_dir)
    data = load_dataset(data_root, "segmentation")
    pipeline.echo_config(cfg, out)
    run = pipeline.run_segmentation_cv(data, cfg, out)
    print(f"{cfg.family}: " + "  ".join(f"{k}={run.aggregate.mean[k]:.4f}+-{run.aggregate.std[k]:.4f}" for k in run.aggregate.mean))
    return 0


def cmd_segment_apply(args) -> int:
    cfg = _config(args, "segment-apply")
    data_root = _require_dir(cfg.data_root, "data_root")
    ckpt = Path(cfg.segmentation_checkpoint) if cfg.segmentation_checkpoint else None
    if ckpt is None or not ckpt.is_file():
        raise ConfigError(f"segmentation_checkpoint not found: {cfg.segmentation_checkpoint or '(unset)'}")
    model = checkpoint.load(ckpt)
    stats = pipeline.stats_from_meta(checkpoint.load_meta(ckpt))
    cfg = replace(cfg, input_size=model.config.input_size)
    data = load_dataset(data_root, "classification")
    segmented = pipeline.segment_samples(data, model, stats, cfg)
    out = Path(cfg.output_dir)
    files = pipeline.write_segmented_tree(data, segmented, out, truth_root=data_root)
    pipeline.echo_config(cfg, out)
    pipeline.write_manifest(out, "segment-apply", files + ["resolved_config.txt"])
    print(f"segmented {len(segmented)} images into {out}")
    return 0


def _classification_data(root: Path, input_kind: str):
    mask_dir = "pred_masks" if input_kind == "segmented" and (root / "pred_masks").is_dir() else "lung_masks"
    return load_dataset(root, "classification", mask_dir=mask_dir)


def cmd_classify(args) -> int:
    cfg = _config(args, "classify")
    data_root = _require_dir(cfg.data_root, "data_root")
    test = None
    if cfg.test_root:
        test = _classification_data(_require_dir(cfg.test_root, "test_root"), args.input)
    data = _classification_data(data_root, args.input)
    out = Path(cfg.output_dir)
    pipeline.echo_config(cfg, out, {"input": args.input})
    run = pipeline.run_classification_cv(data, cfg, args.input, test, out)
    m = run.aggregate.mean
    print(f"{cfg.family} ({args.input}): " + "  ".join(f"{k}={m[k]:.4f}" for k in pipeline.TABLE_COLUMNS))
    s = run.summed
    print(f"summed confusion: tp={s.tp} tn={s.tn} fp={s.fp} fn={s.fn}")
    return 0


def cmd_cam(args) -> int:
    cfg = _config(args, "cam")
    data_root = _require_dir(cfg.data_root, "data_root")
    ckpt = Path(args.checkpoint)
    model = checkpoint.load(ckpt)
    meta = checkpoint.load_meta(ckpt)
    stats = pipeline.stats_from_meta(meta)
    input_kind = meta.get("meta", {}).get("input", "whole")
    data = _classification_data(data_root, input_kind)
    samples = list(data)
    if args.ids:
        wanted = [i.strip() for i in args.ids.split(",") if i.strip()]
        by_id = {s.id: s for s in samples}
        unknown = [i for i in wanted if i not in by_id]
        if unknown:
            raise UsageError(f"unknown image ids: {', '.join(unknown)}")
        samples = [by_id[i] for i in wanted]
    truth = None
    if not args.no_localization:
        truth_data = load_dataset(data_root, "classification", mask_dir="lung_masks")
        truth = {s.id: s.mask for s in truth_data if s.mask is not None}
        missing = [s.id for s in samples if s.id not in truth]
        if missing:
            raise UsageError(f"localization requested but no lung mask for: {', '.join(missing[:5])}")
    out = Path(cfg.output_dir)
    rows = pipeline.cam_audit(model, stats, samples, input_kind, cfg.cam_layer, out, truth, args.misclassified_only)
    pipeline.write_cam_csv(out / "localization.csv", rows)
    pipeline.echo_config(cfg, out, {"checkpoint": str(ckpt)})
    files = ["localization.csv", "resolved_config.txt"]
    files += [f"{d}/{r.id.replace('/', '_')}.{ext}" for r in rows for d, ext in (("overlays", "ppm"), ("heatmaps", "pgm"))]
    pipeline.write_manifest(out, "cam", files)
    locs = [r.localization for r in rows if r.localization is not None]
    mean = f"{sum(locs) / len(locs):.4f}" if locs else "n/a"
    print(f"{len(rows)} heatmaps written to {out}; mean localization {mean}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise MissingArtifactError(f"run directory not found: {run_dir}")
    text, missing = pipeline.run_report(run_dir)
    if missing:
        for m in missing:
            print(f"missing: {m}", file=sys.stderr)
        raise MissingArtifactError(f"{len(missing)} artifact(s) missing")
    (run_dir / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pulmo", description="Lung segmentation and TB classification experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--lesion-count", default="1,3", help="inclusive range lo,hi")
    p.add_argument("--lesion-intensity", type=float, default=0.2)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--spurious-cue", default="none", choices=("none", "train_only", "flipped_at_test"))
    p.set_defaults(func=cmd_synth)

    for name, func in (("segment-train", cmd_segment_train), ("segment-apply", cmd_segment_apply)):
        p = sub.add_parser(name)
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("classify")
    _add_config_flags(p)
    p.add_argument("--input", choices=("whole", "segmented"), default="whole")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("cam")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, help="classifier checkpoint")
    p.add_argument("--ids", default="", help="comma-separated sample ids such as tb/00003 (default: all)")
    p.add_argument("--misclassified-only", action="store_true")
    p.add_argument("--no-localization", action="store_true", help="skip the lung-mask localization score")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("report")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PulmoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
