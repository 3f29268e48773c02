import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixc import trainer as tr
from mixc.netcore import Conv2D, Dense, GlobalAvgPool, MaxPool, Model, ModelSpec, ReLU
from mixc.trainer import EpochRecord, RunHistory, Scheduler, Split, TrainConfig, lr_schedule


def hand_trace(losses, lr=0.001, p=5, f=10.0, stop=50):
    """Independent re-statement of the scheduler rules as a plain loop."""
    best, since_best, since_cut, out = float("inf"), 0, 0, []
    for v in losses:
        if v < best - 1e-6:
            best, since_best, since_cut = v, 0, 0
        else:
            since_best += 1
            since_cut += 1
            if since_cut == p:
                lr, since_cut = lr / f, 0
        out.append(lr)
        if since_best == stop:
            break
    return out


def test_plateau_cut_at_epoch_six():
    lrs = lr_schedule([1.0] * 6)
    assert lrs[:5] == [0.001] * 5
    assert lrs[5] == pytest.approx(0.0001, rel=1e-15)


def test_scripted_sequence_with_recovery():
    # improve, plateau 5 (cut), improve, plateau 5 (cut) + 2
    losses = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6]
    expected = [1e-3] * 5 + [1e-4] * 6 + [1e-5] * 3
    np.testing.assert_allclose(lr_schedule(losses), expected, rtol=1e-15)


def test_early_stop_after_fifty_flat_epochs():
    lrs = lr_schedule([1.0] + [2.0] * 100)
    assert len(lrs) == 51
    # ten cuts at epochs 6, 11, ..., 51
    assert lrs[-1] == pytest.approx(0.001 / 10 ** 10, rel=1e-12)


def test_plateau_cut_does_not_reset_stop_counter():
    s = Scheduler(0.001, plateau_patience=2, early_stop_patience=3)
    s.update(1.0)
    for _ in range(2):
        s.update(1.0)
    assert s.lr == pytest.approx(1e-4) and not s.stopped
    s.update(1.0)
    assert s.stopped


def test_tiny_improvement_does_not_count():
    # drops of at most 1e-6 are float noise, not improvement
    assert lr_schedule([1.0, 1.0 - 5e-7, 1.0 - 9e-7, 1.0 - 1e-6, 1.0 - 1e-6, 1.0 - 1e-6])[-1] == pytest.approx(1e-4)
    assert lr_schedule([1.0, 1.0, 1.0, 1.0, 1.0 - 2e-6, 1.0])[-1] == 0.001


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.8, 1.0]), min_size=1, max_size=120),
       st.integers(1, 8), st.integers(1, 30))
def test_scheduler_matches_hand_trace(losses, p, stop):
    got = lr_schedule(losses, plateau_patience=p, early_stop_patience=stop)
    assert got == hand_trace(losses, p=p, stop=stop)
    # lr non-increasing and only changes by the factor
    for a, b in zip(got, got[1:]):
        assert b == a or b == pytest.approx(a / 10, rel=1e-12)


def _history(train, val):
    return RunHistory([EpochRecord(i + 1, 0.0, t, 0.0, v, 0.001) for i, (t, v) in enumerate(zip(train, val))])


def test_gap_constant():
    assert tr.train_val_gap(_history([0.99] * 60, [0.95] * 60)) == pytest.approx(0.04, abs=1e-15)


def test_gap_linear_series_last_fifty():
    gaps = 0.001 * np.arange(1, 101)
    h = _history(gaps, np.zeros(100))
    # arithmetic series: mean of 0.051 .. 0.100
    assert tr.train_val_gap(h) == pytest.approx(0.0755, abs=1e-12)


def test_gap_short_history_uses_all_epochs():
    assert tr.train_val_gap(_history([0.9, 0.8], [0.7, 0.8])) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        tr.train_val_gap(RunHistory())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(plateau_patience=0)
    with pytest.raises(ValueError):
        TrainConfig(plateau_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(alpha=0.2, batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(rotation_max=40)
    d = tr.desk_config(alpha=0.4)
    assert (d.max_epochs, d.plateau_patience, d.early_stop_patience, d.image_size, d.alpha) == (40, 3, 15, 64, 0.4)


# ---------------------------------------------------------------------------
# training loop on a tiny separable problem

TINY = ModelSpec(3, (Conv2D(3, 4), ReLU(), MaxPool(), GlobalAvgPool(), Dense(4, 4)))


def tiny_data(n, seed):
    rng = np.random.default_rng(seed)
    cls = np.arange(n) % 4
    imgs = rng.random((n, 8, 8)) * 0.2
    for i, c in enumerate(cls):
        imgs[i, :, 2 * c:2 * c + 2] += 0.7
    return Split(imgs, np.eye(4)[cls])


@pytest.fixture(scope="module")
def data():
    return tiny_data(40, 0), tiny_data(12, 1), tiny_data(12, 2)


def test_single_epoch(data):
    cfg = TrainConfig(max_epochs=1, image_size=8)
    res = tr.train(Model.init(TINY, 0), data[0], data[1], cfg)
    assert len(res.history) == 1 and res.history.stop_reason == "max_epochs"


def test_seeded_runs_identical(data):
    cfg = TrainConfig(alpha=0.4, max_epochs=3, batch_size=8, rotation_max=10, hflip=True, seed=4, image_size=8)
    a = tr.train(Model.init(TINY, 1), data[0], data[1], cfg, data[2])
    b = tr.train(Model.init(TINY, 1), data[0], data[1], cfg, data[2])
    assert a.history == b.history
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.best_model.params, b.best_model.params))


def test_val_and_test_never_augmented(data):
    cfg = TrainConfig(alpha=0.4, max_epochs=2, batch_size=8, shift_max=0.1, image_size=8)
    res = tr.train(Model.init(TINY, 1), data[0], data[1], cfg, data[2])
    assert set(res.pipeline.calls) == {"train"}
    assert len(res.pipeline.calls) == 2 * 5


def test_training_learns_and_keeps_best(data):
    cfg = TrainConfig(max_epochs=30, batch_size=8, init_lr=0.01, image_size=8)
    res = tr.train(Model.init(TINY, 2), data[0], data[1], cfg, data[2])
    h = res.history
    assert h.test_acc is not None and h.test_acc >= 0.75
    best_val = h.records[h.best_epoch - 1].val_loss
    assert best_val == min(r.val_loss for r in h.records)
    assert tr.evaluate_split(res.best_model, data[1])[0] == pytest.approx(best_val, abs=1e-12)
    lrs = h.column("lr")
    assert np.all(np.diff(lrs) <= 0)


def test_early_stopping_halts(data):
    cfg = TrainConfig(max_epochs=200, batch_size=8, init_lr=0.0, plateau_patience=1, early_stop_patience=2,
                      image_size=8)
    res = tr.train(Model.init(TINY, 0), *data[:2], config=cfg)
    assert res.history.stop_reason == "early_stopping"
    assert len(res.history) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(data):
    cfg = TrainConfig(max_epochs=5, batch_size=8, init_lr=1e300, image_size=8)
    with pytest.raises(tr.TrainingDiverged, match="epoch"):
        tr.train(Model.init(TINY, 0), *data[:2], config=cfg)


def test_empty_split_rejected(data):
    with pytest.raises(ValueError):
        tr.train(Model.init(TINY, 0), Split(np.zeros((0, 8, 8)), np.zeros((0, 4))), data[1], TrainConfig())


def test_singleton_batch_folded_under_mixup():
    rng = np.random.default_rng(0)
    batches = tr._batches(33, 32, rng, min_size=2)
    assert [len(b) for b in batches] == [33]
    assert [len(b) for b in tr._batches(33, 32, rng, min_size=1)] == [32, 1]


# ---------------------------------------------------------------------------
# cross-validation


def test_fold_sizes_on_default_dataset():
    from mixc.synthgen import DEFAULT_COUNTS
    classes = np.repeat(np.arange(4), DEFAULT_COUNTS)
    folds = tr.stratified_folds(classes, 5, seed=0)
    assert sorted(map(len, folds), reverse=True) == [176, 176, 176, 175, 175]
    assert np.array_equal(np.sort(np.concatenate(folds)), np.arange(878))
    for f in folds:
        for c, n in enumerate(DEFAULT_COUNTS):
            assert abs(np.sum(classes[f] == c) - n / 5) < 1
    again = tr.stratified_folds(classes, 5, seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(folds, again))


def test_folds_reject_small_class():
    classes = np.array([0] * 10 + [1] * 10 + [2] * 3 + [3] * 10)
    with pytest.raises(ValueError, match="Transitional"):
        tr.stratified_folds(classes, 5, 0)


def test_kfold_perfect_model(monkeypatch, data):
    x = np.concatenate([data[0].images, data[1].images])
    y = np.concatenate([data[0].labels, data[1].labels])

    def fake_train(model, train_split, val_split, config, test_split=None, on_epoch=None):
        return tr.TrainResult(RunHistory(test_acc=1.0), model, model, None)

    monkeypatch.setattr(tr, "train", fake_train)
    res = tr.kfold_cv(x, y, TrainConfig(image_size=8), k=5, model_factory=lambda s: Model.init(TINY, s))
    assert res.mean == 1.0 and res.std == 0.0
    assert sum(res.fold_sizes) == 52


def test_kfold_runs(data):
    x = np.concatenate([data[0].images, data[1].images])
    y = np.concatenate([data[0].labels, data[1].labels])
    cfg = TrainConfig(max_epochs=2, batch_size=8, image_size=8)
    res = tr.kfold_cv(x, y, cfg, k=3, model_factory=lambda s: Model.init(TINY, s))
    assert len(res.fold_accs) == 3
    assert res.std == pytest.approx(np.std(res.fold_accs))
    assert res.config["max_epochs"] == 2
