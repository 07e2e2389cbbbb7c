"""Command-line entry points binding the modules into reproducible runs.

Every command writes its outputs plus the resolved run config into its
output directory. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import DatasetManifest, LabelMask, load_case, make_folds, save_raw_case
from .errors import ConfigError, DataError, NonFiniteLossError
from .evaluation import (FoldReport, compare_methods, cross_validate, evaluate_case,
                         summarize_cases)
from .networks import load_checkpoint
from .perturb import CHANNEL_NAMES, apply_operator
from .preprocess import preprocess_case
from .synthgen import generate_phantoms
from .training import predict_channels, train_2d, train_cascade

OUTPUT_ROOT_ENV = "SCARSEG_OUTPUT_ROOT"


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.for_profile(
        getattr(args, "profile", "emidec") or "emidec")
    if getattr(args, "set", None):
        cfg = cfg.with_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.reseed(args.seed)
    if getattr(args, "device", None):
        cfg.train.device = args.device
    if getattr(args, "vanilla", False):
        cfg.vanilla_cascade = True
    if getattr(args, "manifest", None):
        cfg.manifest = args.manifest
    return cfg


def _out_dir(cfg: RunConfig, args, *parts: str) -> Path:
    base = Path(getattr(args, "out", None) or
                Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / cfg.output_dir)
    path = base.joinpath(*parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot(cfg: RunConfig, out_dir: Path) -> None:
    cfg.save(out_dir / "config.json")


def _manifest(cfg: RunConfig) -> DatasetManifest:
    if not cfg.manifest:
        raise ConfigError("no manifest path configured (set `manifest` or --manifest)")
    return DatasetManifest.load(cfg.manifest, cfg.scheme)


def _fold_ids(cfg: RunConfig, manifest: DatasetManifest, fold: int):
    split = make_folds(manifest.case_ids, cfg.folds, cfg.seed)
    if not 0 <= fold < len(split):
        raise ConfigError(f"fold {fold} out of range for {len(split)} folds")
    return split.folds[fold]


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args, "dataset")
    if getattr(args, "count", None):
        cfg.phantoms.count = args.count
    manifest = generate_phantoms(cfg.phantoms, out)
    cfg.manifest = str(out / "manifest.json")
    _snapshot(cfg, out)
    print(f"wrote {len(manifest.entries)} phantoms to {out}")
    return 0


def cmd_train2d(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest(cfg)
    train_ids, _ = _fold_ids(cfg, manifest, args.fold)
    out = _out_dir(cfg, args, f"fold_{args.fold}")
    _snapshot(cfg, out)
    ckpt = train_2d(manifest, train_ids, cfg.network_2d, cfg.preprocess,
                    cfg.augment_standard, cfg.train, out)
    print(f"2D checkpoint: {ckpt}")
    return 0


def cmd_train_cascade(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest(cfg)
    train_ids, _ = _fold_ids(cfg, manifest, args.fold)
    out = _out_dir(cfg, args, f"fold_{args.fold}")
    _snapshot(cfg, out)
    ckpt2d = args.checkpoint2d or str(out / "checkpoint_2d.pt")
    if not Path(ckpt2d).exists():
        raise DataError(f"2D checkpoint not found: {ckpt2d}")
    ckpt = train_cascade(manifest, train_ids, ckpt2d, cfg.network_3d, cfg.preprocess,
                         cfg.augment_standard, cfg.augment_elevated, cfg.perturbation,
                         cfg.train, out, vanilla=cfg.vanilla_cascade)
    print(f"3D checkpoint: {ckpt}")
    return 0


def _predict_cases(cfg: RunConfig, manifest: DatasetManifest, case_ids, ckpt2d, ckpt3d,
                   out: Path, fmt: str = "raw") -> None:
    from .data import save_mask
    from .inference import predict_cascade

    net2d, _ = load_checkpoint(ckpt2d)
    net3d, _ = load_checkpoint(ckpt3d)
    device = cfg.train.device
    net2d.to(device)
    net3d.to(device)
    for cid in case_ids:
        entry = manifest.entry(cid)
        volume, _ = load_case(entry, manifest.scheme)
        result = predict_cascade(
            net2d, net3d, volume, cfg.scheme, cfg.preprocess,
            lv_center=entry.lv_center, soft_masks=cfg.train.soft_mask_channels,
            device=device,
            provenance={"checkpoint_2d": str(ckpt2d), "checkpoint_3d": str(ckpt3d)})
        mask = LabelMask(result.labels, manifest.scheme)
        suffix = ".u8" if fmt == "raw" else ".nii.gz"
        save_mask(out / f"{cid}{suffix}", mask, volume.spacing)
        (out / f"{cid}_provenance.json").write_text(
            json.dumps(result.provenance, indent=2) + "\n")


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest(cfg)
    out = _out_dir(cfg, args, "predictions")
    _snapshot(cfg, out)
    case_ids = args.cases or manifest.case_ids
    _predict_cases(cfg, manifest, case_ids, args.checkpoint2d, args.checkpoint3d, out,
                   fmt=args.format)
    print(f"predictions written to {out}")
    return 0


def _load_predictions(pred_dir: Path, manifest: DatasetManifest):
    from .data import read_raw_mask
    from . import nifti

    for entry in manifest.entries:
        if entry.mask_path is None:
            continue
        raw = pred_dir / f"{entry.case_id}.u8"
        nii = pred_dir / f"{entry.case_id}.nii.gz"
        nii2 = pred_dir / f"{entry.case_id}.nii"
        if raw.exists():
            pred = read_raw_mask(raw, manifest.scheme).labels
        elif nii.exists() or nii2.exists():
            data, _ = nifti.read(nii if nii.exists() else nii2)
            pred = np.rint(data).astype(np.uint8)
        else:
            raise DataError(f"no prediction found for case {entry.case_id} "
                            f"in {pred_dir}")
        yield entry, pred


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest(cfg)
    pred_dir = Path(args.pred_dir)
    out = _out_dir(cfg, args, "evaluation")
    _snapshot(cfg, out)

    cases = []
    for entry, pred in _load_predictions(pred_dir, manifest):
        volume, gt = load_case(entry, manifest.scheme)
        cases.append(evaluate_case(pred, gt.labels, manifest.scheme, volume.spacing,
                                   case_id=entry.case_id))
    summary = summarize_cases(cases)
    report = {"cases": [c.to_dict() for c in cases], "summary": summary}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    with open(out / "report.csv", "w") as fh:
        fh.write("Target,Metric,Mean,SD,N\n")
        for target, metrics in summary.items():
            for m, stats_ in metrics.items():
                scale = 100.0 if m in ("dsc", "avdr") else 1.0
                fh.write(f"{target},{m.upper()},{stats_['mean'] * scale:.2f},"
                         f"{stats_['sd'] * scale:.2f},{stats_['n']}\n")

    if args.compare_with:
        other = []
        other_manifest = manifest
        for entry, pred in _load_predictions(Path(args.compare_with), other_manifest):
            volume, gt = load_case(entry, manifest.scheme)
            other.append(evaluate_case(pred, gt.labels, manifest.scheme, volume.spacing,
                                       case_id=entry.case_id))
        target = args.compare_target
        a = {c.case_id: c.targets[target].dsc for c in cases}
        b = {c.case_id: c.targets[target].dsc for c in other}
        comparison = compare_methods(a, b)
        comparison["target"] = target
        (out / "comparison.json").write_text(json.dumps(comparison, indent=2) + "\n")
        print(f"paired test on {target} DSC: p = {comparison['p_value']:.4g}")

    print(f"evaluation written to {out}")
    return 0


def cmd_crossval(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest(cfg)
    out = _out_dir(cfg, args)
    _snapshot(cfg, out)
    split = make_folds(manifest.case_ids, cfg.folds, cfg.seed)
    (out / "folds.json").write_text(json.dumps(split.to_dict(), indent=2) + "\n")

    checkpoints = []
    for fold, (train_ids, _) in enumerate(split.folds):
        fold_dir = out / f"fold_{fold}"
        fold_dir.mkdir(exist_ok=True)
        ck2d = train_2d(manifest, train_ids, cfg.network_2d, cfg.preprocess,
                        cfg.augment_standard, cfg.train, fold_dir)
        ck3d = train_cascade(manifest, train_ids, ck2d, cfg.network_3d, cfg.preprocess,
                             cfg.augment_standard, cfg.augment_elevated,
                             cfg.perturbation, cfg.train, fold_dir,
                             vanilla=cfg.vanilla_cascade)
        checkpoints.append((ck2d, ck3d))

    report = cross_validate(manifest, split, checkpoints, cfg.preprocess,
                            out_dir=out, device=cfg.train.device)
    print(f"cross-validation report written to {out / 'report.csv'}")
    for target, metrics in report.cross.items():
        if "dsc" in metrics:
            print(f"  {target}: DSC {100 * metrics['dsc']['mean']:.2f} "
                  f"+- {100 * metrics['dsc']['sd']:.2f}")
    return 0


def _channels_to_labels(channels: np.ndarray, scheme) -> np.ndarray:
    """Binary scar/MVO channels -> a composite label map for writing to disk."""
    labels = np.zeros(channels.shape[1:], dtype=np.uint8)
    for i, cls in enumerate(scheme.auxiliary_classes):
        labels[channels[i] > 0.5] = cls
    return labels


def cmd_perturb(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest(cfg)
    entry = manifest.entry(args.case)
    volume, gt = load_case(entry, manifest.scheme)
    if gt is None:
        raise DataError(f"case {args.case} has no mask; the perturbation operators "
                        "need ground truth")
    out = _out_dir(cfg, args, "perturb", args.case)
    _snapshot(cfg, out)

    vol_pre, gt_pre, _ = preprocess_case(volume, gt, cfg.preprocess, entry.lv_center)
    aux = cfg.scheme.auxiliary_classes
    if args.checkpoint2d:
        net2d, _ = load_checkpoint(args.checkpoint2d)
        channels = predict_channels(net2d, vol_pre.data, aux, cfg.train.device)
    else:
        # no trained network at hand: start from the ground-truth channels
        channels = np.stack([(gt_pre.labels == c) for c in aux]).astype(np.uint8)

    rng = np.random.default_rng(cfg.seed)
    perturbed, record = apply_operator(args.op, channels, vol_pre.data, gt_pre.labels,
                                       cfg.perturbation, rng)

    spacing = volume.spacing
    before = LabelMask(_channels_to_labels(channels, cfg.scheme), manifest.scheme)
    after = LabelMask(_channels_to_labels(perturbed, cfg.scheme), manifest.scheme)
    save_raw_case(out, "before", mask=before, spacing=spacing, shape=before.shape)
    save_raw_case(out, "after", mask=after, spacing=spacing, shape=after.shape)
    (out / "record.json").write_text(json.dumps(record.to_dict(), indent=2) + "\n")
    print(f"{args.op} on {args.case}: {record.to_dict()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scarseg",
        description="Error-correcting 2D-3D cascaded segmentation of myocardial "
                    "scar and MVO")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fold=False):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--profile", default=None, choices=["emidec", "myops", "custom"],
                       help="dataset profile when no config file is given")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config field by dotted path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--device", default=None)
        p.add_argument("--manifest", default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--vanilla", action="store_true",
                       help="train/use the cascade without mask perturbation")
        if fold:
            p.add_argument("--fold", type=int, required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    common(p)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train2d", help="train the 2D slice segmenter on one fold")
    common(p, fold=True)
    p.set_defaults(func=cmd_train2d)

    p = sub.add_parser("train-cascade", help="train the 3D refiner on one fold")
    common(p, fold=True)
    p.add_argument("--checkpoint2d", default=None)
    p.set_defaults(func=cmd_train_cascade)

    p = sub.add_parser("predict", help="run the cascade over a manifest")
    common(p)
    p.add_argument("--checkpoint2d", required=True)
    p.add_argument("--checkpoint3d", required=True)
    p.add_argument("--cases", nargs="*", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a directory of predicted masks")
    common(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--compare-with", default=None,
                   help="second prediction directory for a paired test")
    p.add_argument("--compare-target", default="infarction")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", help="full k-fold pipeline plus report")
    common(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("perturb", help="apply one perturbation operator to a case")
    common(p)
    p.add_argument("--case", required=True)
    p.add_argument("--op", required=True,
                   choices=["delete_class", "zero_mask", "fake_scar", "fake_mvo"])
    p.add_argument("--checkpoint2d", default=None)
    p.set_defaults(func=cmd_perturb)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
