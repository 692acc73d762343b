import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tisc import grad, model, train
from tisc.data import SegmentDataset, SynthSpec, synthesize
from tisc.errors import ConfigError, DataError, DivergenceError
from tisc.model import NetworkConfig
from tisc.train import RMSPropState, TrainConfig

import oracles


# -- optimizer -----------------------------------------------------------------


def test_rmsprop_zero_gradient_no_change():
    p = [np.array([1.0, -2.0, 3.0])]
    st_ = RMSPropState.zeros_like(p)
    train.rmsprop_step(p, [np.zeros(3)], st_, TrainConfig(l2_coefficient=0.0))
    assert p[0].tolist() == [1.0, -2.0, 3.0]


def test_rmsprop_hand_evaluated_step():
    p = [np.array([0.7])]
    s = RMSPropState.zeros_like(p)
    cfg = TrainConfig(learning_rate=0.01, rms_decay=0.99, epsilon=1e-8, l2_coefficient=0.0)
    train.rmsprop_step(p, [np.array([1.0])], s, cfg)
    assert s.square_avg[0][0] == pytest.approx(0.01, rel=1e-12)
    assert p[0][0] - 0.7 == pytest.approx(-0.0999999900, rel=1e-9)


def test_rmsprop_l2_term_and_mask():
    p = [np.array([2.0, 5.0])]
    s = RMSPropState.zeros_like(p)
    cfg = TrainConfig(learning_rate=0.1, l2_coefficient=0.25)
    train.rmsprop_step(p, [np.zeros(2)], s, cfg, masks=[np.array([True, False])])
    g = 2 * 0.25 * 2.0
    assert s.square_avg[0].tolist() == [pytest.approx(0.01 * g * g), 0.0]
    assert p[0][0] == pytest.approx(2.0 - 0.1 * g / (np.sqrt(0.01 * g * g) + 1e-8))
    assert p[0][1] == 5.0


def test_rmsprop_deterministic():
    rng = np.random.default_rng(0)
    g = [rng.normal(size=5)]
    runs = []
    for _ in range(2):
        p = [np.ones(5)]
        s = RMSPropState.zeros_like(p)
        train.rmsprop_step(p, g, s, TrainConfig())
        train.rmsprop_step(p, g, s, TrainConfig())
        runs.append(p[0].copy())
    assert np.array_equal(*runs)


def test_rmsprop_shape_mismatch():
    p = [np.ones(3)]
    with pytest.raises(DataError):
        train.rmsprop_step(p, [np.ones(4)], RMSPropState.zeros_like(p), TrainConfig())


def test_train_config_validation():
    for bad in (dict(rms_decay=1.0), dict(folds=1), dict(test_fraction=0.0), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"momentum": 0.9})


# -- splitting and balancing -----------------------------------------------------


def test_make_folds_arithmetic():
    labels = np.repeat([0, 1], 50)
    plan = train.make_folds(labels, folds=10, test_fraction=0.3, seed=0)
    assert len(plan.test) == 30
    assert [len(f) for f in plan.folds] == [7] * 10
    again = train.make_folds(labels, folds=10, test_fraction=0.3, seed=0)
    assert np.array_equal(plan.test, again.test)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))


def test_make_folds_too_few():
    with pytest.raises(DataError):
        train.make_folds(np.array([0, 0, 0, 1]), folds=3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 4), st.integers(2, 10))
def test_fold_stratification_property(seed, n_classes, k):
    rng = np.random.default_rng(seed)
    counts = rng.integers(2 * k, 6 * k, size=n_classes)
    labels = rng.permutation(np.repeat(np.arange(n_classes), counts))
    plan = train.make_folds(labels, folds=k, seed=seed)
    rest = np.setdiff1d(np.arange(len(labels)), plan.test)
    assert np.intersect1d(plan.test, rest).size == 0
    assert np.array_equal(np.sort(np.concatenate(plan.folds)), rest)
    rest_counts = np.bincount(labels[rest], minlength=n_classes)
    for f in plan.folds:
        fc = np.bincount(labels[f], minlength=n_classes)
        assert np.all(np.abs(fc - rest_counts / k) <= 1)


def test_balance_examples():
    labels = np.array([0] * 10 + [1] * 4)
    keep = train.balance_indices(labels, seed=0)
    assert np.bincount(labels[keep]).tolist() == [4, 4]
    assert len(set(keep.tolist())) == len(keep)
    even = np.array([0, 1, 0, 1])
    assert np.array_equal(np.sort(train.balance_indices(even, seed=1)), np.arange(4))
    with pytest.raises(DataError):
        train.balance_indices(np.array([0, 0, 2]), n_classes=3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=4, max_size=80), st.integers(0, 1000))
def test_balance_no_duplicates_property(labels, seed):
    labels = np.array(labels)
    if len(np.unique(labels)) < labels.max() + 1:
        return
    keep = train.balance_indices(labels, seed=seed)
    assert len(np.unique(keep)) == len(keep)
    counts = np.bincount(labels[keep])
    assert counts.min() == counts.max() == np.bincount(labels).min()


# -- fitting ---------------------------------------------------------------------


def separable_dataset(n=200, T=64, seed=0):
    rng = np.random.default_rng(seed)
    template = rng.normal(size=T)
    labels = np.repeat([0, 1], n // 2)
    sign = np.where(labels == 1, 1.0, -1.0)
    x = sign[:, None] * template + 0.3 * rng.normal(size=(n, T))
    return SegmentDataset(x[:, None, :].astype(np.float32), labels, 2)


def small_config(T=64, **kw):
    return NetworkConfig(segment_length=T, input_scales=[2, 6], hidden_stack=[[3, 6]], **kw)


def test_fit_separable_task():
    ds = separable_dataset()
    cfg = TrainConfig(max_epochs=30, folds=3, learning_rate=1e-2, batch_size=32, seed=0)
    nets, metrics, plan = train.fit(model.build(small_config(), 0), ds, cfg)
    assert len(nets) == 3
    for f in metrics.folds:
        assert max(f.val_accuracy) >= 0.99
        assert 0 <= f.test_accuracy <= 1


def test_fit_zero_learning_rate_keeps_parameters():
    ds = separable_dataset(seed=1)
    net = model.build(small_config(), 3)
    cfg = TrainConfig(max_epochs=3, folds=2, learning_rate=0.0, seed=0)
    nets, metrics, _ = train.fit(net, ds, cfg)
    for n in nets:
        assert all(np.array_equal(a, b) for a, b in zip(n.parameters(), net.parameters()))
    x = ds.segments()
    _, acc, _ = train.evaluate(net, x, ds.labels)
    for f in metrics.folds:
        assert f.val_accuracy[0] == f.val_accuracy[-1]


def test_fit_reproducible_and_worker_independent():
    ds = separable_dataset(seed=2)
    cfg = TrainConfig(max_epochs=4, folds=3, seed=5)
    runs = [train.fit(model.build(small_config(), 1), ds, cfg, threads=t)[1].to_json() for t in (1, 1, 3)]
    assert runs[0] == runs[1] == runs[2]


def test_test_split_untouched_during_training():
    ds = separable_dataset(seed=3)
    log = oracles.AccessLog(ds)
    cfg = TrainConfig(max_epochs=3, folds=2, seed=0)
    _, _, plan = train.fit(model.build(small_config(), 0), log, cfg)
    test = set(plan.test.tolist())
    test_calls = [c for c in log.calls if set(c.tolist()) & test]
    assert len(test_calls) == cfg.folds
    assert all(np.array_equal(c, plan.test) for c in test_calls)
    # test access happens last for its fold: train, validation, then test
    for k in range(cfg.folds):
        assert np.array_equal(log.calls[3 * k + 2], plan.test)


def test_loss_non_increasing_small_lr():
    for seed in range(10):
        ds = synthesize(SynthSpec(n_per_class=32, seg_len=256, burst_scale=6, seed=seed))
        net = model.build(NetworkConfig(segment_length=256, input_scales=[3, 8],
                                        hidden_stack=[[4, 8]], dropout_rate=0.0), seed)
        xi = model.prepare_input(net, ds.segments())[0]
        cfg = TrainConfig(learning_rate=1e-4)
        state = RMSPropState.zeros_like(net.parameters())
        losses = []
        for _ in range(6):
            loss, tape, _ = grad.loss_and_grads(net, xi, ds.labels, mode="eval")
            losses.append(loss)
            train.rmsprop_step(net.parameters(), tape.params, state, cfg, net.parameter_masks())
        assert all(b <= a for a, b in zip(losses, losses[1:])), (seed, losses)


def test_training_stays_finite():
    ds = synthesize(SynthSpec(n_per_class=64, seg_len=256, burst_scale=6, seed=0))
    net = model.build(NetworkConfig(segment_length=256, input_scales=[3, 8], hidden_stack=[[4, 8]]), 0)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=16)
    state = RMSPropState.zeros_like(net.parameters())
    rng = np.random.default_rng(0)
    x = ds.segments()
    for _ in range(5):
        train.train_epoch(net, x, ds.labels, cfg, state, rng)
    assert all(np.isfinite(p).all() for p in net.parameters())
    assert all(np.isfinite(s).all() for s in state.square_avg)


def test_divergence_reported():
    ds = separable_dataset(seed=4)
    ds.data[:, 0, 3] = np.nan
    with pytest.raises(DivergenceError, match="fold"):
        train.fit(model.build(small_config(), 0), ds, TrainConfig(max_epochs=2, folds=2))


def test_fit_rejects_mismatched_dataset():
    ds = separable_dataset(T=32)
    with pytest.raises(DataError):
        train.fit(model.build(small_config(), 0), ds, TrainConfig(folds=2))


def test_metrics_serialization():
    ds = separable_dataset(seed=5)
    _, m, _ = train.fit(model.build(small_config(), 0), ds, TrainConfig(max_epochs=2, folds=2))
    d = m.to_dict()
    assert d["summary"]["n_folds"] == 2
    rows = m.to_csv().strip().splitlines()
    assert rows[0] == ",".join(train.Metrics.CSV_COLUMNS)
    assert len(rows) == 1 + sum(len(f.train_loss) for f in m.folds)


# -- benchmark -------------------------------------------------------------------


def test_benchmark_report_fields():
    ds = synthesize(SynthSpec(n_per_class=64, seg_len=256, burst_scale=6, seed=0))
    net = model.build(NetworkConfig(segment_length=256, input_scales=[3, 8], hidden_stack=[[4, 8]]), 0)
    rep = train.benchmark(net, ds, repeats=100, epoch_repeats=2)
    assert rep["inference_trials"] == 100
    for k in ("inference_ms_mean", "inference_ms_std", "epoch_s_mean", "epoch_s_std"):
        assert np.isfinite(rep[k]) and rep[k] >= 0
    assert rep["inference_ms_mean"] > 0 and rep["epoch_s_mean"] > 0
    assert rep["machine"]["numpy"] == np.__version__


def test_epoch_time_scales_linearly():
    net = model.build(NetworkConfig(segment_length=1024, input_scales=[4, 9], hidden_stack=[[5, 9]]), 0)
    small = synthesize(SynthSpec(n_per_class=256, seed=0))
    big = synthesize(SynthSpec(n_per_class=512, seed=0))
    t1 = min(train.benchmark(net, small, repeats=1, epoch_repeats=3)["epoch_s_mean"] for _ in range(2))
    t2 = min(train.benchmark(net, big, repeats=1, epoch_repeats=3)["epoch_s_mean"] for _ in range(2))
    assert t2 <= 2.5 * t1
