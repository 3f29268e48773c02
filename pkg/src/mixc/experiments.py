"""Seeded comparison experiments on the synthetic dataset.

Both drivers train the SprayNet under the desk preset and report per-run
summaries; the acceptance suite and the scripts in ``scripts/`` share them.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from mixc import synthgen
from mixc.netcore import Model, spraynet_spec
from mixc.trainer import Split, desk_config, last_train_acc, train, train_val_gap

SEEDS = (0, 1, 2)
ALPHAS = (0.0, 0.2, 0.4, 0.6)


@dataclass
class RunSummary:
    alpha: float
    seed: int
    gap: float
    train_acc: float
    test_acc: float
    epochs: int
    stop_reason: str
    seconds: float

    def to_dict(self):
        return asdict(self)


def desk_dataset(data_seed: int = 0, size: int = 64):
    """The 878-image dataset rendered in memory: (manifest, images[N, H, W])."""
    return synthgen.build_dataset(synthgen.DEFAULT_COUNTS, size, data_seed)


def splits_of(manifest, images) -> dict:
    labels = np.array([e.label for e in manifest.entries], dtype=np.float64)
    out = {}
    for name in ("train", "val", "test"):
        mask = np.array([e.split == name for e in manifest.entries])
        out[name] = Split(images[mask], labels[mask])
    return out


def run_one(splits: dict, alpha: float, seed: int, test: Split | None = None, **overrides) -> RunSummary:
    cfg = desk_config(alpha=alpha, seed=seed, **overrides)
    t0 = time.perf_counter()
    res = train(Model.init(spraynet_spec(cfg.channels), seed), splits["train"], splits["val"], cfg,
                test if test is not None else splits["test"])
    h = res.history
    return RunSummary(alpha, seed, train_val_gap(h, cfg.gap_window), last_train_acc(h, cfg.gap_window),
                      h.test_acc, len(h), h.stop_reason, time.perf_counter() - t0)


def sweep(splits: dict, alphas=ALPHAS, seeds=SEEDS, test: Split | None = None,
          on_run: Optional[Callable[[RunSummary], None]] = None, **overrides) -> list:
    out = []
    for seed in seeds:
        for alpha in alphas:
            r = run_one(splits, alpha, seed, test, **overrides)
            out.append(r)
            if on_run:
                on_run(r)
    return out


def mean_of(runs, alpha, field):
    vals = [getattr(r, field) for r in runs if r.alpha == alpha]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# the two comparisons


@dataclass
class Verdict:
    name: str
    passed: bool
    detail: str


def direction_of_effect(runs) -> list:
    """Gap halving, test accuracy no worse, and train accuracy falling with alpha."""
    gap0, gap2 = mean_of(runs, 0.0, "gap"), mean_of(runs, 0.2, "gap")
    test0, test2 = mean_of(runs, 0.0, "test_acc"), mean_of(runs, 0.2, "test_acc")
    tr = [mean_of(runs, a, "train_acc") for a in (0.2, 0.4, 0.6)]
    tol = 0.005
    return [
        Verdict("gap", gap2 < 0.5 * gap0, f"mixup gap {gap2:.4f} vs 0.5 x baseline gap {0.5 * gap0:.4f}"),
        Verdict("test", test2 >= test0, f"mixup test acc {test2:.4f} vs baseline {test0:.4f}"),
        Verdict("train_trend", all(b <= a + tol for a, b in zip(tr, tr[1:])),
                "train acc over alpha 0.2/0.4/0.6: " + " / ".join(f"{v:.4f}" for v in tr)),
    ]


def corrupted_splits(manifest, images, fraction=0.2, delta=0.05, seed=0):
    """Boundary-corrupt training labels only; val and test keep clean labels."""
    noisy = synthgen.corrupt_labels(manifest, "boundary", fraction, seed, delta, splits=("train",))
    return splits_of(noisy, images), noisy


def label_noise_resistance(runs) -> Verdict:
    base, mix = mean_of(runs, 0.0, "test_acc"), mean_of(runs, 0.2, "test_acc")
    return Verdict("corrupted", mix - base > 0.01,
                   f"clean test acc, mixup {mix:.4f} vs baseline {base:.4f} (diff {100 * (mix - base):+.2f} pts)")
