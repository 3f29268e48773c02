"""Mixup vs baseline on the clean synthetic dataset (desk preset).

    python3 -u scripts/direction_of_effect.py --seeds 0,1,2 --alphas 0,0.2,0.4,0.6 --out runs/doe.json
"""
import argparse
import json
from pathlib import Path

from mixc import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--alphas", default="0,0.2,0.4,0.6")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="override the desk preset's 40 epochs (for quick looks)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", help="write per-run summaries as JSON")
    args = p.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    alphas = [float(a) for a in args.alphas.split(",")]

    overrides = {"image_size": args.size}
    if args.epochs:
        overrides["max_epochs"] = args.epochs
    manifest, images = ex.desk_dataset(args.data_seed, args.size)
    runs = ex.sweep(ex.splits_of(manifest, images), alphas, seeds,
                    on_run=lambda r: print(json.dumps(r.to_dict()), flush=True), **overrides)

    print(f"\n{'alpha':>6} {'gap':>8} {'train':>7} {'test':>7}")
    for a in alphas:
        print(f"{a:>6} {ex.mean_of(runs, a, 'gap'):>8.4f} {ex.mean_of(runs, a, 'train_acc'):>7.4f} "
              f"{ex.mean_of(runs, a, 'test_acc'):>7.4f}")
    if {0.0, 0.2, 0.4, 0.6} <= set(alphas):
        for v in ex.direction_of_effect(runs):
            print(f"{v.name}: {'PASS' if v.passed else 'FAIL'}  {v.detail}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps([r.to_dict() for r in runs], indent=1))


if __name__ == "__main__":
    main()
