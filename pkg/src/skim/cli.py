"""Command-line surface: dataset generation, training, (cross-)dataset
evaluation, few-shot sweeps, parameter accounting, and overlay rendering.

Every command that owns an output directory writes its fully resolved
configuration there as config.json before doing any work, so a run can be
reproduced from its artifacts alone.  Failures print a single
"error: ..." line and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from . import data
from . import trainer as TR
from .errors import InputError, SkimError
from .model import (ModelConfig, PRESETS, build_model, count_by_component,
                    count_params, preset_config)
from .objective import LossConfig, aggregate_report, write_report


def _write_resolved(out_dir, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    doc = dict(payload, version=__version__)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _model_config(args) -> ModelConfig:
    overrides = {}
    if getattr(args, "rank", None) is not None:
        overrides["lora_rank"] = args.rank
    if getattr(args, "image_size", None) is not None:
        overrides["image_size"] = args.image_size
    return preset_config(args.preset, **overrides)


def _train_config(args) -> TR.TrainConfig:
    cfg = TR.TrainConfig()
    for flag, field in (("epochs", "epochs"), ("batch_size", "batch_size"),
                        ("micro_batch", "micro_batch"), ("lr", "lr0"),
                        ("weight_decay", "weight_decay"),
                        ("patience", "patience"),
                        ("target_dice", "target_dice"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, field, v)
    if getattr(args, "alpha", None) is not None:
        cfg.loss = LossConfig(alpha=args.alpha)
    if getattr(args, "no_augment", False):
        cfg.use_augment = False
    return cfg.validate()


def _load_split(manifest: data.DatasetManifest, split: str):
    entries = (list(manifest.samples) if split == "all"
               else manifest.split_entries(split))
    return [manifest.load(e) for e in entries]


def _dataset_label(manifest_path, manifest: data.DatasetManifest) -> str:
    dom = manifest.spec.get("domain_id") if isinstance(manifest.spec, dict) else None
    return dom or os.path.splitext(os.path.basename(manifest_path))[0]


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    if bool(args.domain) == bool(args.spec):
        raise InputError("give exactly one of --domain or --spec")
    if args.spec:
        with open(args.spec) as fh:
            doc = json.load(fh)
        doc.setdefault("seed", args.seed)
        if args.image_size is not None:
            doc["image_size"] = args.image_size
        spec = data.DomainSpec(**doc).validate()
    else:
        spec = data.builtin_domain(args.domain, seed=args.seed,
                                   image_size=args.image_size or 128)
    n = args.count or data.DOMAIN_DEFAULT_SIZES.get(spec.domain_id, 40)
    _write_resolved(args.out, {"command": "generate", "spec": asdict(spec),
                               "count": n, "out": str(args.out)})
    manifest = data.synth_generate(spec, n, args.out)
    data.split_dataset(manifest, seed=spec.seed)
    data.save_manifest(manifest, os.path.join(args.out, "manifest.json"))

    by_split = {s: manifest.split_entries(s) for s in data.SPLITS}
    print(f"wrote {n} samples for {spec.domain_id} to {args.out}")
    print("splits: " + "  ".join(f"{s}={len(v)}" for s, v in by_split.items()))
    kinds = {}
    for e in manifest.samples:
        for k in e.kinds:
            kinds[k] = kinds.get(k, 0) + 1
    print("defect kinds: " + "  ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    for s in ("val", "test"):
        if not by_split[s]:
            print(f"warning: {s} split is empty (n={n} is small)")
    return 0


# ---------------------------------------------------------------------------
# train

def _train_once(model_cfg: ModelConfig, train_cfg: TR.TrainConfig,
                manifest: data.DatasetManifest, out_dir, label, quiet=False):
    """Shared by train and fewshot: fit on train/val, report on test."""
    train_samples = _load_split(manifest, "train")
    val_samples = _load_split(manifest, "val")
    if not train_samples:
        raise InputError("manifest has an empty train split")
    if not val_samples:
        raise InputError("manifest has an empty val split")
    model = build_model(model_cfg, seed=train_cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "best.ckpt")
    log = None if quiet else print
    t0 = time.time()
    out = TR.fit(model, train_cfg, train_samples, val_samples,
                 checkpoint_path=ckpt, log=log)
    with open(os.path.join(out_dir, "history.txt"), "w") as fh:
        fh.write("\n".join(out["history"]) + "\n")

    total, trainable = count_params(model)
    report = None
    test_samples = _load_split(manifest, "test")
    if test_samples:
        per_image, _ = TR.evaluate(model, test_samples)
        report = aggregate_report(
            per_image, {"total": total, "trainable": trainable},
            config={"model": asdict(model_cfg), "train": asdict(train_cfg)},
            seed=train_cfg.seed, dataset=label,
            elapsed=time.time() - t0)
        write_report(report, os.path.join(out_dir, "report.json"))
    elif not quiet:
        print("warning: test split is empty, no report written")
    return model, out, report


def cmd_train(args) -> int:
    model_cfg = _model_config(args)
    train_cfg = _train_config(args)
    _write_resolved(args.out, {
        "command": "train", "preset": args.preset,
        "model": asdict(model_cfg), "train": asdict(train_cfg),
        "manifest": str(args.manifest), "out": str(args.out)})
    manifest = data.load_manifest(args.manifest)
    label = _dataset_label(args.manifest, manifest)
    _, out, report = _train_once(model_cfg, train_cfg, manifest, args.out, label)
    print(f"best val dice {out['best_val_dice']:.6f} at epoch {out['best_epoch']} "
          f"({out['stopped_by']}, {out['epochs_run']} epochs run)")
    if report:
        agg = report["aggregate"]
        print("test: " + "  ".join(f"{k}={agg[k]:.4f}" for k in sorted(agg)))
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    model_cfg = _model_config(args)
    _write_resolved(args.out, {
        "command": "eval", "preset": args.preset, "model": asdict(model_cfg),
        "checkpoint": str(args.checkpoint),
        "manifests": [str(m) for m in args.manifest],
        "split": args.split, "threshold": args.threshold, "out": str(args.out)})
    model = build_model(model_cfg, seed=0)
    TR.load_checkpoint(model, args.checkpoint)
    total, trainable = count_params(model)
    for mpath in args.manifest:
        manifest = data.load_manifest(mpath)
        label = _dataset_label(mpath, manifest)
        samples = _load_split(manifest, args.split)
        if not samples:
            raise InputError(f"{mpath}: no samples in split {args.split!r}")
        t0 = time.time()
        per_image, agg = TR.evaluate(model, samples, threshold=args.threshold)
        report = aggregate_report(
            per_image, {"total": total, "trainable": trainable},
            config={"model": asdict(model_cfg), "threshold": args.threshold,
                    "split": args.split},
            seed=None, dataset=label, elapsed=time.time() - t0)
        write_report(report, os.path.join(args.out, f"report_{label}.json"))
        print(f"{label} [{args.split}, n={len(samples)}]: "
              + "  ".join(f"{k}={agg[k]:.4f}" for k in sorted(agg)))
    return 0


# ---------------------------------------------------------------------------
# fewshot

def cmd_fewshot(args) -> int:
    model_cfg = _model_config(args)
    base_cfg = _train_config(args)
    ks = list(args.ks)
    seeds = list(args.seeds)
    _write_resolved(args.out, {
        "command": "fewshot", "preset": args.preset, "model": asdict(model_cfg),
        "train": asdict(base_cfg), "manifest": str(args.manifest),
        "ks": ks, "seeds": seeds, "out": str(args.out)})
    manifest = data.load_manifest(args.manifest)
    label = _dataset_label(args.manifest, manifest)
    n_train = len(manifest.split_entries("train"))
    for k in ks:
        if k > n_train:
            raise InputError(f"k={k} exceeds train split size {n_train}")

    cells = {}
    for k in ks:
        for seed in seeds:
            sub = data.few_shot_sample(manifest, k, seed)
            cfg = replace(base_cfg, seed=seed)
            run_dir = os.path.join(args.out, f"k{k}_seed{seed}")
            _, _, report = _train_once(model_cfg, cfg, sub, run_dir, label,
                                       quiet=True)
            if report is None:
                raise InputError("few-shot manifest has an empty test split")
            dice = report["aggregate"]["dice"]
            cells.setdefault(k, []).append(dice)
            print(f"k={k} seed={seed}: test dice {dice:.4f}")

    lines = [f"few-shot sweep on {label} (test split, {len(seeds)} seeds)",
             f"{'k':>6}  {'dice mean':>10}  {'dice sd':>8}  per-seed"]
    table = {}
    for k in ks:
        arr = np.array(cells[k])
        mean, sd = float(arr.mean()), float(arr.std())
        table[str(k)] = {"dice_per_seed": [float(x) for x in arr],
                         "dice_mean": mean, "dice_sd": sd}
        per = " ".join(f"{x:.4f}" for x in arr)
        lines.append(f"{k:>6}  {mean:>10.4f}  {sd:>8.4f}  {per}")
    text = "\n".join(lines)
    print(text)
    with open(os.path.join(args.out, "table.txt"), "w") as fh:
        fh.write(text + "\n")
    with open(os.path.join(args.out, "fewshot.json"), "w") as fh:
        json.dump({"dataset": label, "ks": ks, "seeds": seeds, "cells": table},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# params

# published full-scale reference for the same adapter recipe on a ViT-B
# encoder; printed for context, never recomputed here
_FULL_SCALE_REF = (91_233_774, 657_442)


def cmd_params(args) -> int:
    model_cfg = _model_config(args)
    model = build_model(model_cfg, seed=0)
    by_comp = count_by_component(model)
    total, trainable = count_params(model)
    depth, d, r = model_cfg.depth, model_cfg.embed_dim, model_cfg.lora_rank
    closed_form = 2 * depth * 2 * d * r   # q and v bypasses, two factors each
    print(f"preset {args.preset} (rank {r})")
    for comp, n in by_comp.items():
        print(f"  {comp:<16} {n:>10,}")
    print(f"  {'total':<16} {total:>10,}")
    print(f"  {'trainable':<16} {trainable:>10,}  ({100.0 * trainable / total:.3f}%)")
    print(f"  encoder bypass closed form 4*depth*dim*rank = {closed_form:,} "
          f"({'matches' if closed_form == by_comp['encoder-bypass'] else 'MISMATCH'})")
    ref_t, ref_r = _FULL_SCALE_REF
    print(f"  full-scale reference: {ref_t:,} total / {ref_r:,} trainable "
          f"({100.0 * ref_r / ref_t:.2f}%)")
    if getattr(args, "out", None):
        _write_resolved(args.out, {"command": "params", "preset": args.preset,
                                   "model": asdict(model_cfg)})
        with open(os.path.join(args.out, "params.json"), "w") as fh:
            json.dump({"preset": args.preset, "by_component": by_comp,
                       "total": total, "trainable": trainable,
                       "bypass_closed_form": closed_form},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# overlay

def _contour(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbor outside the mask."""
    m = mask.astype(bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    # border pixels of the frame are never interior
    interior[0, :] = interior[-1, :] = False
    interior[:, 0] = interior[:, -1] = False
    return m & ~interior


def cmd_overlay(args) -> int:
    model_cfg = _model_config(args)
    _write_resolved(args.out, {
        "command": "overlay", "preset": args.preset, "model": asdict(model_cfg),
        "checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
        "split": args.split, "threshold": args.threshold, "out": str(args.out)})
    model = build_model(model_cfg, seed=0)
    TR.load_checkpoint(model, args.checkpoint)
    manifest = data.load_manifest(args.manifest)
    entries = (list(manifest.samples) if args.split == "all"
               else manifest.split_entries(args.split))
    if not entries:
        raise InputError(f"no samples in split {args.split!r}")
    count = 0
    for entry in entries:
        sample = manifest.load(entry)
        probs = TR.predict(model, sample)
        pred = probs >= args.threshold
        img = sample.image.copy()
        img[pred] = 0.5 * img[pred] + 0.5 * np.array([1.0, 0.0, 0.0])
        edge = _contour(sample.mask)
        img[edge] = 0.5 * img[edge] + 0.5 * np.array([0.0, 1.0, 0.0])
        name = os.path.basename(entry.image)
        data.write_p6(os.path.join(args.out, name),
                      np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8))
        count += 1
    print(f"wrote {count} overlays to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_model_flags(p):
    p.add_argument("--preset", default="toy-B", choices=sorted(PRESETS),
                   help="model size preset")
    p.add_argument("--rank", type=int, help="bypass rank override")
    p.add_argument("--image-size", type=int, dest="image_size",
                   help="model input resolution override")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--micro-batch", type=int, dest="micro_batch")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--alpha", type=float, help="loss mix: alpha*bce + (1-alpha)*dice")
    p.add_argument("--patience", type=int)
    p.add_argument("--target-dice", type=float, dest="target_dice")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-augment", action="store_true", dest="no_augment")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skim",
                                 description="low-rank adapter segmentation workbench")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic fabric dataset")
    p.add_argument("--domain", help="builtin domain D1/D2/D3")
    p.add_argument("--spec", help="path to a domain spec JSON")
    p.add_argument("-n", "--count", type=int, help="sample count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a manifest, report on its test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one or more manifests")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--threshold", type=float, default=0.5)
    _add_model_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fewshot", help="few-shot sweep over k train samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ks", type=int, nargs="+", default=[10, 50, 100])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("params", help="print the parameter budget of a preset")
    p.add_argument("--out")
    _add_model_flags(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("overlay", help="render prediction/ground-truth overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--threshold", type=float, default=0.5)
    _add_model_flags(p)
    p.set_defaults(func=cmd_overlay)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except SkimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected failure guard
        if os.environ.get("SKIM_DEBUG"):
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
