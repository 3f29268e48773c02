"""Command line entry point: ``mixc <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mixc import metrics, store, synthgen
from mixc.augment import Pipeline
from mixc.netcore import Model, spraynet_spec
from mixc.trainer import (Split, TrainConfig, desk_config, kfold_cv, last_train_acc, train,
                          train_val_gap)

log = logging.getLogger("mixc")


class UsageError(Exception):
    pass


def _counts(text: str):
    try:
        counts = [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"counts must be comma-separated integers, got {text!r}") from None
    if len(counts) != len(synthgen.CLASSES) or any(c <= 0 for c in counts):
        raise argparse.ArgumentTypeError(f"need {len(synthgen.CLASSES)} positive counts, got {text!r}")
    return counts


def _grid(text: str):
    try:
        rows, cols = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 4x5, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be >= 1")
    return rows, cols


def _data_dir(path) -> Path:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise UsageError(f"data directory {p} not found or has no manifest.json")
    return p


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory containing manifest.json")
    p.add_argument("--alpha", type=float, default=0.0, help="mixup Beta(alpha, alpha) shape; 0 disables mixup")
    p.add_argument("--rot", type=float, default=0.0, help="max random rotation in degrees")
    p.add_argument("--shift", type=float, default=0.0, help="max random shift as a fraction of size")
    p.add_argument("--hflip", action="store_true", help="random horizontal flips")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--desk", action="store_true", help="scaled preset: 64px, 40 epochs, patiences 3/15")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, help="max epochs")
    p.add_argument("--plateau-patience", type=int)
    p.add_argument("--early-stop-patience", type=int)
    p.add_argument("--size", type=int, help="image size fed to the network")
    p.add_argument("--out", required=True, help="run directory (relative paths go under the run root)")


def _config(args) -> TrainConfig:
    base = desk_config() if args.desk else TrainConfig()
    over = {"alpha": args.alpha, "rotation_max": args.rot, "shift_max": args.shift,
            "hflip": args.hflip, "seed": args.seed}
    for flag, key in (("batch_size", "batch_size"), ("lr", "init_lr"), ("epochs", "max_epochs"),
                      ("plateau_patience", "plateau_patience"),
                      ("early_stop_patience", "early_stop_patience"), ("size", "image_size")):
        if getattr(args, flag) is not None:
            over[key] = getattr(args, flag)
    try:
        return replace(base, **over)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load(data_dir: Path, split, size):
    images, labels, _ = store.load_split(data_dir, split, size=size)
    return Split(images, labels)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    if args.size < synthgen.MIN_SIZE:
        raise UsageError(f"size < {synthgen.MIN_SIZE}")
    out = store.resolve(args.out, args.run_root)
    manifest = synthgen.generate_dataset(out, args.counts, args.size, args.seed, args.format)
    print(manifest.summary())
    print("per class: " + ", ".join(f"{n}={c}" for n, c in zip(synthgen.CLASSES, manifest.class_counts())))
    print(f"written to {out}")


def cmd_corrupt(args):
    src = _data_dir(args.data)
    if not 0.0 <= args.fraction <= 1.0:
        raise UsageError("--fraction must lie in [0, 1]")
    if args.delta <= 0:
        raise UsageError("--delta must be > 0")
    manifest = store.load_manifest(src)
    splits = args.splits.split(",") if args.splits else None
    out_manifest = synthgen.corrupt_labels(manifest, args.mode, args.fraction, args.seed, args.delta, splits)
    out = store.resolve(args.out, args.run_root)
    out.mkdir(parents=True, exist_ok=True)
    for e in out_manifest.entries:
        e.path = os.path.relpath((src / e.path).resolve(), out.resolve())
    store.save_manifest(out_manifest, out / "manifest.json")
    print(out_manifest.provenance[-1])


def cmd_train(args):
    data = _data_dir(args.data)
    config = _config(args)
    run_dir = store.resolve(args.out, args.run_root)
    tr, va, te = (_load(data, s, config.image_size) for s in ("train", "val", "test"))
    model = Model.init(spraynet_spec(config.channels), config.seed)
    result = train(model, tr, va, config, te)
    h = result.history
    window = config.gap_window
    _, report = metrics.evaluate(result.best_model, te.images, te.labels, config.channels)
    summary = {
        "gap": train_val_gap(h, window),
        "train_acc": last_train_acc(h, window),
        "test_acc": h.test_acc,
        "stop_reason": h.stop_reason,
        "best_epoch": h.best_epoch,
        "epochs": len(h),
        "window": window,
        "pipeline": result.pipeline.describe(),
        "checkpoint_used_for_test": "best_val_loss",
    }
    snapshot = {"command": "train", "data": str(data), "config": config.to_dict()}
    store.write_run(run_dir, snapshot, result, summary)
    store.write_json(run_dir / "report.json", report.to_dict())
    (run_dir / "report.txt").write_text(report.to_text())
    print(f"pipeline: {summary['pipeline']}")
    print(f"epochs {len(h)} ({h.stop_reason}), best epoch {h.best_epoch}")
    print(f"gap {100 * summary['gap']:.1f}%  train acc {100 * summary['train_acc']:.1f}%  "
          f"test acc {100 * h.test_acc:.1f}%")


def cmd_cv(args):
    data = _data_dir(args.data)
    config = _config(args)
    if args.k < 2:
        raise UsageError("--k must be >= 2")
    split = _load(data, None, config.image_size)
    res = kfold_cv(split.images, split.labels, config, k=args.k)
    out = store.resolve(args.out, args.run_root)
    out.mkdir(parents=True, exist_ok=True)
    store.write_json(out / "cv.json", {"k": args.k, "fold_accs": res.fold_accs, "mean": res.mean,
                                       "std": res.std, "fold_sizes": res.fold_sizes,
                                       "data": str(data), "config": res.config})
    print("folds: " + " ".join(f"{a:.4f}" for a in res.fold_accs))
    print(f"mean {res.mean:.4f}  std {res.std:.4f}")


def cmd_eval(args):
    data = _data_dir(args.data)
    model = store.load_checkpoint(args.checkpoint)
    split = _load(data, None if args.split == "all" else args.split, args.size)
    cm, report = metrics.evaluate(model, split.images, split.labels, model.spec.in_channels)
    out = store.resolve(args.out, args.run_root)
    out.mkdir(parents=True, exist_ok=True)
    store.write_json(out / "report.json", {**report.to_dict(), "confusion_matrix": cm.tolist()})
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")


def cmd_compare(args):
    names = args.names.split(",") if args.names else [Path(r).name for r in args.runs]
    if len(names) != len(args.runs):
        raise UsageError("--names must list one name per run")
    if len(args.runs) < 2:
        raise UsageError("compare needs at least two runs")
    runs = {}
    for name, r in zip(names, args.runs):
        r = store.resolve(r, args.run_root)
        if not (r / "history.csv").is_file():
            raise UsageError(f"{r} has no history.csv")
        h = store.read_history_csv(r / "history.csv")
        if (r / "metrics.json").is_file():
            h.test_acc = store.read_json(r / "metrics.json").get("test_acc")
        runs[name] = h
    rows = metrics.compare_runs(runs, args.window)
    print(metrics.rows_to_text(rows), end="")
    if args.out:
        store.resolve(args.out, args.run_root).write_text(metrics.rows_to_csv(rows))


def cmd_mixup_preview(args):
    data = _data_dir(args.data)
    rows, cols = args.grid
    n = rows * cols
    cfg = _preview_config(args)
    manifest = store.load_manifest(data)
    pool = manifest.split("train") or manifest.entries
    rng = np.random.default_rng(args.seed)
    # mixup needs a partner, so a 1x1 grid still draws two sources
    picks = rng.choice(len(pool), size=max(n, 2), replace=len(pool) < max(n, 2))
    images = np.stack([store.read_image(data / pool[i].path)[:, :, 0] for i in picks])
    labels = np.array([pool[i].label for i in picks])
    pipeline = Pipeline(cfg)
    out_x, out_y, records = pipeline(images, labels, rng)
    lams = [r.lam for r in records[:n]]
    h, w = out_x.shape[1:]
    grid = np.zeros((rows * h, cols * w))
    for k in range(n):
        r, c = divmod(k, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = out_x[k]
    out = store.resolve(args.out, args.run_root)
    out.parent.mkdir(parents=True, exist_ok=True)
    store.write_image(grid, out)
    sidecar = {
        "alpha": args.alpha, "grid": [rows, cols], "seed": args.seed, "pipeline": pipeline.describe(),
        "cells": [{"row": k // cols, "col": k % cols, "lambda": lams[k], "label": out_y[k].tolist(),
                   "source": pool[picks[k]].meta.source_id} for k in range(n)],
    }
    store.write_json(out.with_suffix(".json"), sidecar)
    print(f"wrote {out} ({rows}x{cols}); mean lambda distance from {{0,1}}: "
          f"{np.mean([min(l, 1 - l) for l in lams]):.4f}")


def _preview_config(args):
    from mixc.augment import AugmentConfig

    try:
        return AugmentConfig(args.alpha, args.rot, args.shift, args.hflip)
    except ValueError as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixc", description="Mixup training for spray morphology images.")
    p.add_argument("--run-root", help=f"root for relative output paths (default ${store.RUN_ROOT_ENV} or cwd)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--counts", type=_counts, default=list(synthgen.DEFAULT_COUNTS),
                   help="per-class counts: Pre/Post, No collapse, Transitional, Collapse")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=("pgm", "png"), default="pgm")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train SprayNet on a dataset")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cv", help="stratified k-fold cross-validation")
    _add_train_flags(c)
    c.add_argument("--k", type=int, default=5)
    c.set_defaults(func=cmd_cv)

    e = sub.add_parser("eval", help="precision/recall/F1 report for a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--size", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mixup-preview", help="grid of augmented training images")
    m.add_argument("--data", required=True)
    m.add_argument("--alpha", type=float, default=0.2)
    m.add_argument("--grid", type=_grid, default=(4, 5))
    m.add_argument("--rot", type=float, default=0.0)
    m.add_argument("--shift", type=float, default=0.0)
    m.add_argument("--hflip", action="store_true")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True, help="output PNG; lambdas go to a .json sidecar")
    m.set_defaults(func=cmd_mixup_preview)

    k = sub.add_parser("compare", help="gap / accuracy table over run directories")
    k.add_argument("runs", nargs="+")
    k.add_argument("--names")
    k.add_argument("--window", type=int, default=50)
    k.add_argument("--out", help="optional CSV path")
    k.set_defaults(func=cmd_compare)

    r = sub.add_parser("corrupt", help="write a label-corrupted copy of a manifest")
    r.add_argument("--data", required=True)
    r.add_argument("--mode", choices=("boundary", "random"), required=True)
    r.add_argument("--fraction", type=float, required=True)
    r.add_argument("--delta", type=float, default=0.05)
    r.add_argument("--splits", help="comma-separated splits to corrupt (default all)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_corrupt)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mixc {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"mixc {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
