"""Mixup vs baseline when training labels near class thresholds are flipped.

Val and test keep clean labels. One corruption draw per seed.

    python3 -u scripts/corrupted_labels.py --seeds 0,1,2 --fraction 0.2 --delta 0.05
"""
import argparse
import json
from pathlib import Path

from mixc import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--alphas", default="0,0.2")
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="override the desk preset's 40 epochs (for quick looks)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", help="write per-run summaries as JSON")
    args = p.parse_args()
    alphas = [float(a) for a in args.alphas.split(",")]

    overrides = {"image_size": args.size}
    if args.epochs:
        overrides["max_epochs"] = args.epochs
    manifest, images = ex.desk_dataset(args.data_seed, args.size)
    runs = []
    for seed in (int(s) for s in args.seeds.split(",")):
        splits, noisy = ex.corrupted_splits(manifest, images, args.fraction, args.delta, seed)
        print(noisy.provenance[-1], flush=True)
        runs += ex.sweep(splits, alphas, (seed,), on_run=lambda r: print(json.dumps(r.to_dict()), flush=True), **overrides)

    for a in alphas:
        print(f"alpha {a}: mean clean-test acc {ex.mean_of(runs, a, 'test_acc'):.4f}")
    if {0.0, 0.2} <= set(alphas):
        v = ex.label_noise_resistance(runs)
        print(f"{v.name}: {'PASS' if v.passed else 'FAIL'}  {v.detail}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps([r.to_dict() for r in runs], indent=1))


if __name__ == "__main__":
    main()
