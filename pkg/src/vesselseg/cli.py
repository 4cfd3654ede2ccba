"""Command-line surface tying the pipeline stages together.

Subcommands: prep, stats, balance, augment, train, eval, crossval, ablate,
overlay. A flat INI config file can preset any flag; explicit flags win.
Every run writes a manifest next to its outputs. Exit status: 0 success,
1 validation error, 2 partial evaluation failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import balance as bal
from .data import (FundusSample, ValidationError, discover_dataset, binarize,
                   _read_raster, resize_sample, save_image, save_mask)
from .invariant import InvariantConfig, make_invariant_input
from .losses import LossConfig
from .manifest import RunManifest
from .metrics import (ABLATION_VARIANTS, ablation_run, cross_domain_eval,
                      evaluate_dataset, overlay, predict_sample)
from .model import DualEncoderNet, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "VESSELSEG_DATA_ROOT"


def _load_config(path) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser()
    if path:
        if not Path(path).is_file():
            raise ValidationError(f"config file not found: {path}")
        cp.read(path)
    return {section: dict(cp[section]) for section in cp.sections()}


def _section(cfg: dict, name: str, caster) -> dict:
    out = {}
    for key, raw in cfg.get(name, {}).items():
        cast = caster.get(key)
        if cast is None:
            raise ValidationError(f"unknown key {key!r} in config section [{name}]")
        out[key] = cast(raw)
    return out


def _bool(s: str) -> bool:
    return s.strip().lower() in ("1", "true", "yes", "on")


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except Exception:
        raise ValidationError(f"image size must look like 128x128, got {text!r}")
    return h, w


def _invariant_config(cfg: dict, args) -> InvariantConfig:
    kw = _section(cfg, "invariant", {
        "window_size": int, "alpha_enh": float, "epsilon": float,
        "normalize_output": _bool})
    if getattr(args, "window", None) is not None:
        kw["window_size"] = args.window
    if getattr(args, "alpha_enh", None) is not None:
        kw["alpha_enh"] = args.alpha_enh
    if getattr(args, "no_normalize", False):
        kw["normalize_output"] = False
    return InvariantConfig(**kw).validate()


def _train_config(cfg: dict, args) -> TrainConfig:
    kw = _section(cfg, "train", {
        "learning_rate": float, "weight_decay": float, "epochs": int,
        "batch_size": int, "seed": int, "image_size": _parse_size,
        "checkpoint_every": int, "val_fraction": float, "augment_online": _bool})
    for name in ("epochs", "batch_size", "seed", "val_fraction"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    if getattr(args, "image_size", None) is not None:
        kw["image_size"] = _parse_size(args.image_size)
    return TrainConfig(**kw).validate()


def _loss_config(cfg: dict) -> LossConfig:
    return LossConfig(**_section(cfg, "loss", {
        "alpha": float, "smooth": float, "prob_clamp": float})).validate()


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**_section(cfg, "model", {
        "bottleneck_channels": int, "dropblock_size": int, "dropblock_rate": float,
        "attention_reduction": int, "spatial_kernel": int,
        "use_fff": _bool, "use_frf": _bool, "use_resincept": _bool})).validate()


def _data_root(args) -> Path:
    root = getattr(args, "data", None) or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ValidationError(f"no dataset given: pass --data or set {DATA_ROOT_ENV}")
    return Path(root)


def _load_samples(args, fov_dir=None) -> list[FundusSample]:
    samples = discover_dataset(_data_root(args))
    if fov_dir:
        fov_dir = Path(fov_dir)
        for i, s in enumerate(samples):
            matches = [p for p in sorted(fov_dir.iterdir()) if p.stem == s.id]
            if matches:
                fov = binarize(_read_raster(matches[0], color=False))
                if fov.shape != s.vessel_mask.shape:
                    raise ValidationError(f"FOV {matches[0]} shape mismatch for sample {s.id}")
                samples[i] = FundusSample(s.id, s.image, s.vessel_mask, fov,
                                          s.source_dataset, s.synthetic)
    size = getattr(args, "image_size", None)
    if size:
        target = _parse_size(size)
        samples = [resize_sample(s, target) for s in samples]
    return samples


def _write_sample_dir(out: Path, samples: list[FundusSample]) -> None:
    for s in samples:
        save_image(out / "images" / f"{s.id}.png", s.image)
        save_mask(out / "masks" / f"{s.id}.png", s.vessel_mask)
        save_mask(out / "fov" / f"{s.id}.png", s.fov_mask)


def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else ["empty"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def cmd_prep(args, cfg) -> int:
    icfg = _invariant_config(cfg, args)
    out = Path(args.out)
    manifest = RunManifest("prep", {"invariant": vars(icfg)}, 0, [_data_root(args)])
    for s in _load_samples(args):
        path = out / f"{s.id}__invariant.png"
        save_image(path, make_invariant_input(s, icfg))
        manifest.add_output(path)
    manifest.write(out / "manifest.json")
    return 0


def cmd_stats(args, cfg) -> int:
    samples = _load_samples(args)
    stats = aug.reference_stats([s.image for s in samples],
                                reference_name=_data_root(args).name)
    manifest = RunManifest("stats", {"reference_name": stats.reference_name}, 0,
                           [_data_root(args)])
    stats.to_json(args.out)
    manifest.add_output(args.out)
    manifest.write(str(args.out) + ".manifest.json")
    return 0


def cmd_balance(args, cfg) -> int:
    samples = _load_samples(args)
    out = Path(args.out)
    manifest = RunManifest("balance", {"kmax": args.kmax, "seed": args.seed}, args.seed,
                           [_data_root(args)])
    balanced, model = bal.balance_dataset(samples, args.kmax, args.seed)
    _write_sample_dir(out, balanced)
    report = {"n_input": len(samples), "n_output": len(balanced)}
    if model is not None:
        report.update({
            "k_star": model.k_star,
            "silhouette_by_k": {str(k): v for k, v in model.silhouette_by_k.items()},
            "cluster_sizes": np.bincount(model.labels, minlength=model.k_star).tolist(),
            "deficits": model.deficits, "target_size": model.target_size,
            "medoid_ids": model.medoid_ids,
        })
    else:
        report["skipped"] = "fewer than 4 samples"
    report_path = Path(args.report) if args.report else out / "balance_report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2))
    manifest.add_output(report_path)
    manifest.write(out / "manifest.json")
    return 0


def cmd_augment(args, cfg) -> int:
    stats = aug.ChannelStats.from_json(args.ref_stats)
    samples = _load_samples(args)
    out = Path(args.out)
    acfg = aug.AugmentConfig(alpha_range=(args.alpha_min, args.alpha_max),
                             rotation_degrees=(-args.rot, args.rot)).validate()
    manifest = RunManifest("augment", {"augment": vars(acfg), "count": args.count},
                           args.seed, [_data_root(args), args.ref_stats])
    synthetic = []
    for i, s in enumerate(samples):
        for c in range(args.count):
            seeded = aug.AugmentConfig(acfg.alpha_range, acfg.rotation_degrees,
                                       seed=args.seed + i * args.count + c)
            synthetic.append(aug.augment_sample(s, stats, seeded))
    _write_sample_dir(out, synthetic)
    manifest.write(out / "manifest.json")
    return 0


def cmd_train(args, cfg) -> int:
    tcfg = _train_config(cfg, args)
    lcfg = _loss_config(cfg)
    icfg = _invariant_config(cfg, args)
    out = Path(args.out)
    samples = [resize_sample(s, tcfg.image_size) for s in discover_dataset(_data_root(args))]
    stats = aug.ChannelStats.from_json(args.ref_stats) if args.ref_stats else None
    if args.resume:
        model, _ = load_checkpoint(args.resume)
    else:
        model = DualEncoderNet(_model_config(cfg))
    manifest = RunManifest("train", {"train": {**vars(tcfg)}, "loss": vars(lcfg),
                                     "invariant": vars(icfg)},
                           tcfg.seed, [_data_root(args)])
    history = train(model, samples, stats, tcfg, lcfg, icfg, out_dir=out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", model, {"history": history})
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "lr", "wall_time", "val_loss"])
        writer.writeheader()
        for rec in history:
            writer.writerow(rec)
    manifest.add_output(out / "model.ckpt")
    manifest.add_output(out / "history.csv")
    manifest.write(out / "manifest.json")
    return 0


def cmd_eval(args, cfg) -> int:
    model, _ = load_checkpoint(args.model)
    icfg = _invariant_config(cfg, args)
    samples = _load_samples(args, fov_dir=args.fov)
    out = Path(args.out)
    manifest = RunManifest("eval", {"threshold": args.threshold}, 0,
                           [_data_root(args), args.model])
    result = evaluate_dataset(model, samples, args.threshold, icfg,
                              auc_per_image=args.auc_per_image)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(result.aggregate.as_dict(), indent=2))
    rows = [{"id": r.sample_ids[0], **r.as_dict()} for r in result.per_sample]
    _write_rows(out / "per_sample.csv", rows)
    manifest.add_output(out / "report.json")
    manifest.add_output(out / "per_sample.csv")
    manifest.write(out / "manifest.json")
    print(json.dumps(result.aggregate.as_dict(), indent=2))
    if result.failed_ids:
        log.error("evaluation incomplete; failed samples: %s", result.failed_ids)
        return 2
    return 0


def cmd_crossval(args, cfg) -> int:
    model, _ = load_checkpoint(args.model)
    icfg = _invariant_config(cfg, args)
    targets = []
    for spec_item in args.targets:
        name, _, path = spec_item.partition("=")
        if not path:
            name, path = Path(spec_item).name, spec_item
        samples = discover_dataset(path, source_dataset=name)
        if args.image_size:
            samples = [resize_sample(s, _parse_size(args.image_size)) for s in samples]
        targets.append((name, samples))
    out = Path(args.out)
    manifest = RunManifest("crossval", {"source": args.source}, 0,
                           [args.model] + [t for _, t in (i.partition("=")[::2] for i in args.targets)])
    rows = cross_domain_eval(model, args.source, targets, args.threshold, icfg)
    _write_rows(out / "crossval.csv", rows)
    (out / "crossval.json").write_text(json.dumps(rows, indent=2))
    manifest.add_output(out / "crossval.csv")
    manifest.write(out / "manifest.json")
    print(json.dumps(rows, indent=2))
    if any(r["failed"] for r in rows):
        return 2
    return 0


def cmd_ablate(args, cfg) -> int:
    tcfg = _train_config(cfg, args)
    lcfg = _loss_config(cfg)
    icfg = _invariant_config(cfg, args)
    train_samples = [resize_sample(s, tcfg.image_size)
                     for s in discover_dataset(_data_root(args))]
    test_samples = [resize_sample(s, tcfg.image_size)
                    for s in discover_dataset(args.test)]
    stats = aug.ChannelStats.from_json(args.ref_stats) if args.ref_stats else None
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    out = Path(args.out)
    manifest = RunManifest("ablate", {"variants": variants, "train": vars(tcfg)},
                           tcfg.seed, [_data_root(args), args.test])
    rows = ablation_run(train_samples, test_samples, variants, tcfg, lcfg, icfg,
                        stats, args.threshold)
    _write_rows(out / "ablation.csv", rows)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
    manifest.add_output(out / "ablation.csv")
    manifest.write(out / "manifest.json")
    print(json.dumps(rows, indent=2))
    return 0


def cmd_overlay(args, cfg) -> int:
    model, _ = load_checkpoint(args.model)
    icfg = _invariant_config(cfg, args)
    out = Path(args.out)
    manifest = RunManifest("overlay", {"threshold": args.threshold}, 0,
                           [_data_root(args), args.model])
    for s in _load_samples(args):
        prob = predict_sample(model, s, icfg)
        path = out / f"{s.id}__overlay.png"
        save_image(path, overlay(prob, s.vessel_mask, s.fov_mask, args.threshold))
        manifest.add_output(path)
    manifest.write(out / "manifest.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesselseg",
                                     description="retinal vessel segmentation pipeline")
    parser.add_argument("--config", help="INI config file; flags override its values")
    sub = parser.add_subparsers(dest="command")

    def add(name, func, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(func=func)
        p.add_argument("--data", help=f"dataset root (default ${DATA_ROOT_ENV})")
        p.add_argument("--out", required=name != "stats" or True, help="output directory")
        return p

    p = add("prep", cmd_prep, help="write domain-invariant inputs as PNG")
    p.add_argument("--window", type=int)
    p.add_argument("--alpha-enh", type=float, dest="alpha_enh")
    p.add_argument("--no-normalize", action="store_true", dest="no_normalize")

    add("stats", cmd_stats, help="compute reference channel statistics")

    p = add("balance", cmd_balance, help="similarity-balance a dataset")
    p.add_argument("--kmax", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="cluster report path")

    p = add("augment", cmd_augment, help="color-statistics augmentation")
    p.add_argument("--ref-stats", required=True, dest="ref_stats")
    p.add_argument("--alpha-min", type=float, default=0.7, dest="alpha_min")
    p.add_argument("--alpha-max", type=float, default=1.0, dest="alpha_max")
    p.add_argument("--rot", type=float, default=15.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1, help="synthetics per source image")

    p = add("train", cmd_train, help="train the segmentation model")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--ref-stats", dest="ref_stats", help="enables online augmentation")
    for flag, typ in (("--epochs", int), ("--batch-size", int), ("--seed", int),
                      ("--val-fraction", float)):
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--image-size", dest="image_size", help="HxW, divisible by 8")

    p = add("eval", cmd_eval, help="FOV-masked evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--fov", help="directory of FOV masks overriding the dataset's")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--auc-per-image", action="store_true", dest="auc_per_image")
    p.add_argument("--image-size", dest="image_size")

    p = add("crossval", cmd_crossval, help="cross-domain evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--source", required=True, help="name of the training dataset")
    p.add_argument("--targets", nargs="+", default=[], help="name=path target datasets")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--image-size", dest="image_size")

    p = add("ablate", cmd_ablate, help="train and score model/data variants")
    p.add_argument("--test", required=True, help="test dataset root")
    p.add_argument("--ref-stats", dest="ref_stats")
    p.add_argument("--variants", help=f"comma list from {','.join(ABLATION_VARIANTS)}")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--image-size", dest="image_size")

    p = add("overlay", cmd_overlay, help="render TP/FP/FN composites")
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--image-size", dest="image_size")
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if not getattr(args, "command", None):
        parser.print_usage()
        return 1
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except (ValidationError, IOError, OSError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    raise SystemExit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
