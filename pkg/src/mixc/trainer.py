"""Minibatch training with reduce-on-plateau, early stopping and k-fold CV."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from mixc import netcore
from mixc.augment import AugmentConfig, Pipeline
from mixc.netcore import Adam, Model

log = logging.getLogger(__name__)

IMPROVE_DELTA = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.0
    batch_size: int = 32
    init_lr: float = 0.001
    plateau_patience: int = 5
    plateau_factor: float = 10.0
    early_stop_patience: int = 50
    max_epochs: int = 200
    seed: int = 0
    rotation_max: float = 0.0
    shift_max: float = 0.0
    hflip: bool = False
    image_size: int = 64
    channels: int = 3
    gap_window: int = 50

    def __post_init__(self):
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if self.plateau_factor <= 1:
            raise ValueError("plateau_factor must be > 1")
        if self.batch_size < 1 or (self.alpha > 0 and self.batch_size < 2):
            raise ValueError("batch_size must be >= 2 when mixup is enabled")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        self.augment  # validates magnitudes

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.alpha, self.rotation_max, self.shift_max, self.hflip)

    def to_dict(self) -> dict:
        return asdict(self)


def desk_config(**overrides) -> TrainConfig:
    """Scaled-down protocol for CPU runs: 64px, 40 epochs, patiences 3/15."""
    base = TrainConfig(image_size=64, max_epochs=40, plateau_patience=3, early_stop_patience=15)
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# scheduler state machine


@dataclass
class Scheduler:
    """Reduce-on-plateau plus early stopping, both keyed on validation loss.

    The two counters run independently; a learning-rate cut does not reset
    the early-stop counter.
    """

    lr: float
    plateau_patience: int = 5
    factor: float = 10.0
    early_stop_patience: int = 50
    best: float = math.inf
    plateau_wait: int = 0
    stop_wait: int = 0
    stopped: bool = False

    def update(self, val_loss: float) -> bool:
        """Feed one epoch's validation loss. Returns True if it improved."""
        improved = val_loss < self.best - IMPROVE_DELTA
        if improved:
            self.best = val_loss
            self.plateau_wait = 0
            self.stop_wait = 0
        else:
            self.plateau_wait += 1
            self.stop_wait += 1
            if self.plateau_wait >= self.plateau_patience:
                self.lr /= self.factor
                self.plateau_wait = 0
            if self.stop_wait >= self.early_stop_patience:
                self.stopped = True
        return improved


def lr_schedule(val_losses, init_lr=0.001, plateau_patience=5, factor=10.0, early_stop_patience=50):
    """Learning rate in force after each epoch, truncated where early stopping fires."""
    s = Scheduler(init_lr, plateau_patience, factor, early_stop_patience)
    out = []
    for v in val_losses:
        s.update(v)
        out.append(s.lr)
        if s.stopped:
            break
    return out


# ---------------------------------------------------------------------------
# history


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    test_acc: Optional[float] = None

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


def train_val_gap(history: RunHistory, last_n: int = 50) -> float:
    """Mean of (train_acc - val_acc) over the last ``min(last_n, len)`` epochs."""
    if not history.records:
        raise ValueError("empty history")
    tail = history.records[-last_n:]
    return float(np.mean([r.train_acc - r.val_acc for r in tail]))


def last_train_acc(history: RunHistory, last_n: int = 50) -> float:
    return float(np.mean([r.train_acc for r in history.records[-last_n:]]))


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Split:
    """Grayscale images (N, H, W) in [0, 1] with soft labels (N, 4)."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.images)


@dataclass
class TrainResult:
    history: RunHistory
    best_model: Model
    final_model: Model
    pipeline: Pipeline


def to_input(images: np.ndarray, channels: int = 3) -> np.ndarray:
    """(N, H, W) gray -> (N, C, H, W) network input, channels triplicated."""
    return np.repeat(images[:, None, :, :], channels, axis=1)


def evaluate_split(model: Model, split: Split, channels: int = 3, chunk: int = 128):
    """(loss, accuracy, probs) on clean data; accuracy against the argmax label."""
    if len(split) == 0:
        raise ValueError("empty split")
    probs = np.concatenate([netcore.forward(model, to_input(split.images[i:i + chunk], channels))
                            for i in range(0, len(split), chunk)])
    loss = netcore.soft_cross_entropy(probs, split.labels)
    acc = float(np.mean(probs.argmax(axis=1) == split.labels.argmax(axis=1)))
    return loss, acc, probs


def _batches(n: int, batch_size: int, rng, min_size: int):
    order = rng.permutation(n)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] < min_size:
        starts.pop()
    bounds = starts[1:] + [n]
    return [order[a:b] for a, b in zip(starts, bounds)]


def train(model: Model, train_split: Split, val_split: Split, config: TrainConfig,
          test_split: Split | None = None, on_epoch: Callable | None = None) -> TrainResult:
    """Adam on shuffled minibatches through the augment pipeline.

    ``model`` is updated in place and ends at the final weights; the best
    validation-loss weights are returned separately.
    """
    if len(train_split) == 0 or len(val_split) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if model.spec.in_channels != config.channels:
        raise ValueError(f"model expects {model.spec.in_channels} channels, config has {config.channels}")
    shuffle_ss, aug_ss = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng, aug_rng = np.random.default_rng(shuffle_ss), np.random.default_rng(aug_ss)
    pipeline = Pipeline(config.augment)
    opt = Adam(model.params, lr=config.init_lr)
    sched = Scheduler(config.init_lr, config.plateau_patience, config.plateau_factor, config.early_stop_patience)
    history = RunHistory()
    best = model.copy()
    min_batch = 2 if config.alpha > 0 else 1

    for epoch in range(1, config.max_epochs + 1):
        opt.lr = sched.lr
        loss_sum = hit_sum = 0.0
        for b, idx in enumerate(_batches(len(train_split), config.batch_size, shuffle_rng, min_batch)):
            x, y, _ = pipeline(train_split.images[idx], train_split.labels[idx], aug_rng, tag="train")
            loss, probs, grads = netcore.backward(model, to_input(x, config.channels), y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch {b} (lr={opt.lr:g})")
            opt.step(model.params, grads)
            loss_sum += loss * len(idx)
            hit_sum += float(np.sum(probs.argmax(axis=1) == y.argmax(axis=1)))
        val_loss, val_acc, _ = evaluate_split(model, val_split, config.channels)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"validation loss became {val_loss} at epoch {epoch}")
        rec = EpochRecord(epoch, loss_sum / len(train_split), hit_sum / len(train_split), val_loss, val_acc, opt.lr)
        history.records.append(rec)
        if sched.update(val_loss):
            best = model.copy()
            history.best_epoch = epoch
        log.debug("epoch %d: %s", epoch, rec)
        if on_epoch:
            on_epoch(rec)
        if sched.stopped:
            history.stop_reason = "early_stopping"
            break
    else:
        history.stop_reason = "max_epochs"

    if test_split is not None and len(test_split):
        history.test_acc = evaluate_split(best, test_split, config.channels)[1]
    return TrainResult(history, best, model, pipeline)


# ---------------------------------------------------------------------------
# cross-validation


def stratified_folds(classes: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Deal class-sorted, within-class-shuffled indices round-robin into k folds."""
    classes = np.asarray(classes)
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(classes) < k:
        raise ValueError(f"dataset of {len(classes)} samples is smaller than k={k}")
    from mixc.synthgen import CLASSES

    rng = np.random.default_rng(seed)
    order = []
    for c in range(len(CLASSES)):
        members = np.flatnonzero(classes == c)
        if 0 < len(members) < k:
            raise ValueError(f"class {CLASSES[c]!r} has {len(members)} samples, fewer than k={k}")
        order.extend(rng.permutation(members).tolist())
    order = np.array(order)
    return [np.sort(order[f::k]) for f in range(k)]


@dataclass
class CVResult:
    fold_accs: list
    mean: float
    std: float
    fold_sizes: list
    histories: list = field(default_factory=list)
    config: Optional[dict] = None


def kfold_cv(images: np.ndarray, labels: np.ndarray, config: TrainConfig, k: int = 5,
             model_factory: Callable[[int], Model] | None = None, val_fraction: float = 0.15) -> CVResult:
    """Each fold trains on the other k-1 parts (minus a stratified validation
    carve-out for the schedulers) and reports accuracy on the held-out part.
    Std is the population standard deviation."""
    classes = labels.argmax(axis=1)
    folds = stratified_folds(classes, k, config.seed)
    if model_factory is None:
        model_factory = lambda s: Model.init(netcore.spraynet_spec(config.channels), s)
    accs, hists = [], []
    for f, test_idx in enumerate(folds):
        rest = np.sort(np.concatenate([folds[g] for g in range(k) if g != f]))
        rng = np.random.default_rng([config.seed, f])
        val_mask = np.zeros(len(rest), dtype=bool)
        for c in np.unique(classes[rest]):
            members = np.flatnonzero(classes[rest] == c)
            n_val = max(1, round(val_fraction * len(members))) if len(members) > 1 else 0
            val_mask[rng.permutation(members)[:n_val]] = True
        tr, va = rest[~val_mask], rest[val_mask]
        res = train(model_factory(config.seed + f), Split(images[tr], labels[tr]), Split(images[va], labels[va]),
                    replace(config, seed=config.seed + f), Split(images[test_idx], labels[test_idx]))
        accs.append(res.history.test_acc)
        hists.append(res.history)
    return CVResult(accs, float(np.mean(accs)), float(np.std(accs)), [len(f) for f in folds], hists, config.to_dict())
