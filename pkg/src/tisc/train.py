"""RMSprop training with L2 decay, stratified folds and class balancing.

Protocol per run: a stratified test split is held out once; the remaining
samples are dealt into ``folds`` stratified validation folds. Every fold
trains a fresh copy of the supplied network on the other folds with early
stopping on validation accuracy, restores its best snapshot and evaluates
the untouched test split exactly once.
"""
from __future__ import annotations

import csv
import io
import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import core
from .data import SegmentDataset
from .errors import ConfigError, DataError, DivergenceError
from .grad import loss_and_grads, softmax_cross_entropy
from .model import Network, forward_trace

__all__ = [
    "TrainConfig",
    "RMSPropState",
    "FoldPlan",
    "FoldMetrics",
    "Metrics",
    "rmsprop_step",
    "make_folds",
    "balance_indices",
    "balance",
    "fit",
    "evaluate",
    "benchmark",
]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    rms_decay: float = 0.99
    epsilon: float = 1e-8
    l2_coefficient: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 20
    folds: int = 10
    test_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.rms_decay < 1.0:
            raise ConfigError(f"rms_decay={self.rms_decay} not in (0, 1)")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction={self.test_fraction} not in (0, 1)")
        if self.learning_rate < 0 or self.epsilon <= 0 or self.l2_coefficient < 0:
            raise ConfigError("learning_rate and l2_coefficient must be >= 0, epsilon > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid train config: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer ---------------------------------------------------------------


@dataclass
class RMSPropState:
    square_avg: list

    @classmethod
    def zeros_like(cls, params) -> "RMSPropState":
        return cls([np.zeros_like(p, dtype=np.float64) for p in params])


def rmsprop_step(params, grads, state: RMSPropState, cfg: TrainConfig, masks=None):
    """In-place update ``s = a*s + (1-a)*g**2``, ``p -= lr*g/(sqrt(s)+eps)``.

    ``g`` includes the L2 term ``2*l2*p``. Entries where ``masks`` is False
    (placeholder slots) are left untouched, state included.
    """
    if len(params) != len(grads) or len(params) != len(state.square_avg):
        raise DataError("params, grads and optimizer state differ in length")
    a = cfg.rms_decay
    for i, (p, g, s) in enumerate(zip(params, grads, state.square_avg)):
        if p.shape != g.shape or p.shape != s.shape:
            raise DataError(f"shape mismatch at parameter {i}: {p.shape}, {g.shape}, {s.shape}")
        g = g + 2.0 * cfg.l2_coefficient * p if cfg.l2_coefficient else g
        s_new = a * s + (1.0 - a) * g * g
        step = cfg.learning_rate * g / (np.sqrt(s_new) + cfg.epsilon)
        if masks is not None:
            m = masks[i]
            s[m] = s_new[m]
            p[m] -= step[m]
        else:
            s[...] = s_new
            p -= step
    return params, state


# -- splitting ---------------------------------------------------------------


@dataclass
class FoldPlan:
    test: np.ndarray
    folds: list
    class_counts: np.ndarray  # (folds, classes) validation-fold composition

    def train_indices(self, k: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != k]))

    def to_dict(self) -> dict:
        return {
            "test": self.test.tolist(),
            "folds": [f.tolist() for f in self.folds],
            "class_counts": self.class_counts.tolist(),
        }


def make_folds(labels, folds: int = 10, test_fraction: float = 0.3, seed: int = 0) -> FoldPlan:
    """Stratified, seeded test split plus ``folds`` validation folds.

    Remaining samples are shuffled within class and dealt round-robin across
    folds class after class, so every fold holds floor or ceil of its share of
    each class and fold sizes differ by at most one.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    rng = np.random.default_rng(seed)
    test, rest = [], []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_fraction * len(idx)))
        if len(idx) - n_test < folds:
            raise DataError(
                f"class {c} has {len(idx)} samples; need at least {folds} outside the test split"
            )
        test.append(idx[:n_test])
        rest.append(idx[n_test:])
    order = np.concatenate(rest)
    fold_lists = [np.sort(order[k::folds]) for k in range(folds)]
    # round-robin over the class-major order keeps each class spread evenly
    counts = np.array([[np.sum(labels[f] == c) for c in classes] for f in fold_lists])
    return FoldPlan(np.sort(np.concatenate(test)), fold_lists, counts)


def balance_indices(labels, seed: int = 0, n_classes: int | None = None) -> np.ndarray:
    """Sorted indices subsampling every class, without replacement, to the minority count."""
    labels = np.asarray(labels)
    n_classes = n_classes if n_classes is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        raise DataError(f"empty class(es): {np.flatnonzero(counts == 0).tolist()}")
    m = counts.min()
    rng = np.random.default_rng(seed)
    keep = [
        rng.choice(np.flatnonzero(labels == c), size=m, replace=False)
        for c in range(n_classes)
    ]
    return np.sort(np.concatenate(keep))


def balance(dataset: SegmentDataset, seed: int = 0) -> SegmentDataset:
    return dataset.subset(balance_indices(dataset.labels, seed, dataset.n_classes))


# -- metrics -----------------------------------------------------------------


@dataclass
class FoldMetrics:
    fold: int
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = 0.0
    test_accuracy: float = float("nan")
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0


@dataclass
class Metrics:
    folds: list
    config: dict = field(default_factory=dict)

    @property
    def test_accuracies(self) -> np.ndarray:
        return np.array([f.test_accuracy for f in self.folds])

    def summary(self) -> dict:
        acc = self.test_accuracies
        return {
            "test_accuracy_mean": float(acc.mean()),
            "test_accuracy_std": float(acc.std()),
            "n_folds": len(self.folds),
        }

    def to_dict(self) -> dict:
        return {
            "train_config": self.config,
            "folds": [asdict(f) for f in self.folds],
            "summary": self.summary(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    CSV_COLUMNS = ("fold", "epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for f in self.folds:
            for e in range(len(f.train_loss)):
                w.writerow([f.fold, e, repr(f.train_loss[e]), repr(f.train_accuracy[e]),
                            repr(f.val_loss[e]), repr(f.val_accuracy[e])])
        return buf.getvalue()


# -- training ----------------------------------------------------------------


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 1024):
    """Eval-mode ``(mean loss, accuracy, predictions)`` on prepared segments."""
    if len(y) == 0:
        raise DataError("cannot evaluate on an empty set")
    preds, losses = [], []
    for start in range(0, len(y), batch_size):
        xb = core.interleave(x[start:start + batch_size])
        logits = forward_trace(net, xb, "eval").logits
        loss, _ = softmax_cross_entropy(logits, y[start:start + batch_size])
        losses.append(loss * len(xb))
        preds.append(logits.argmax(axis=1))
    pred = np.concatenate(preds)
    return float(np.sum(losses) / len(y)), float(np.mean(pred == y)), pred


def train_epoch(net: Network, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                state: RMSPropState, rng: np.random.Generator, masks=None):
    """One shuffled pass of mini-batch RMSprop; returns (mean loss, accuracy)."""
    masks = masks if masks is not None else net.parameter_masks()
    order = rng.permutation(len(y))
    total_loss, correct = 0.0, 0
    params = net.parameters()
    for start in range(0, len(y), cfg.batch_size):
        b = order[start:start + cfg.batch_size]
        xb = core.interleave(x[b])
        loss, tape, logits = loss_and_grads(net, xb, y[b], mode="train", rng=rng)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at sample offset {start}")
        rmsprop_step(params, tape.params, state, cfg, masks)
        total_loss += loss * len(b)
        correct += int(np.sum(logits.argmax(axis=1) == y[b]))
    return total_loss / len(y), correct / len(y)


def _fit_fold(net0: Network, dataset: SegmentDataset, plan: FoldPlan, k: int, cfg: TrainConfig):
    net = net0.copy()
    normalize = net.config.normalize
    train_idx, val_idx = plan.train_indices(k), plan.folds[k]
    x_tr, y_tr = dataset.segments(train_idx, normalize), dataset.labels[train_idx]
    x_va, y_va = dataset.segments(val_idx, normalize), dataset.labels[val_idx]
    rng = np.random.default_rng([cfg.seed, k])
    state = RMSPropState.zeros_like(net.parameters())
    masks = net.parameter_masks()
    fm = FoldMetrics(fold=k, n_train=len(train_idx), n_val=len(val_idx), n_test=len(plan.test))
    best = [p.copy() for p in net.parameters()]
    best_acc, since = -1.0, 0
    for epoch in range(cfg.max_epochs):
        try:
            tl, ta = train_epoch(net, x_tr, y_tr, cfg, state, rng, masks)
        except DivergenceError as exc:
            raise DivergenceError(f"fold {k}, epoch {epoch}: {exc}") from None
        vl, va, _ = evaluate(net, x_va, y_va)
        if not np.isfinite(vl):
            raise DivergenceError(f"fold {k}, epoch {epoch}: non-finite validation loss")
        fm.train_loss.append(float(tl))
        fm.train_accuracy.append(float(ta))
        fm.val_loss.append(vl)
        fm.val_accuracy.append(va)
        if va > best_acc:
            best_acc, since, fm.best_epoch = va, 0, epoch
            best = [p.copy() for p in net.parameters()]
        else:
            since += 1
            if since >= cfg.patience:
                break
    net.set_parameters(best)
    fm.best_val_accuracy = best_acc
    # the only access to the held-out split in this fold
    x_te = dataset.segments(plan.test, normalize)
    _, fm.test_accuracy, _ = evaluate(net, x_te, dataset.labels[plan.test])
    return net, fm


def fit(net: Network, dataset: SegmentDataset, cfg: TrainConfig, threads: int | None = 1):
    """Cross-validated training. Returns ``(nets per fold, Metrics, FoldPlan)``.

    Folds run in a thread pool of ``threads`` workers; each fold has its own
    seeded generator, so results do not depend on the worker count.
    """
    cfg.validate()
    nc = net.config
    if (dataset.n_channels, dataset.seg_len) != (nc.num_data_channels, nc.segment_length):
        raise DataError(
            f"dataset segments are ({dataset.n_channels}, {dataset.seg_len}); network expects "
            f"({nc.num_data_channels}, {nc.segment_length})"
        )
    if dataset.n_classes > nc.num_classes:
        raise DataError(f"dataset has {dataset.n_classes} classes, network {nc.num_classes}")
    plan = make_folds(dataset.labels, cfg.folds, cfg.test_fraction, cfg.seed)
    workers = max(1, min(threads or os.cpu_count() or 1, cfg.folds))
    if workers == 1:
        results = [_fit_fold(net, dataset, plan, k, cfg) for k in range(cfg.folds)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda k: _fit_fold(net, dataset, plan, k, cfg), range(cfg.folds)))
    nets = [r[0] for r in results]
    return nets, Metrics([r[1] for r in results], cfg.to_dict()), plan


# -- benchmarking ------------------------------------------------------------


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }


def benchmark(net: Network, dataset: SegmentDataset, cfg: TrainConfig | None = None,
              repeats: int = 100, epoch_repeats: int | None = None) -> dict:
    """Single-threaded latency of one-sample inference and of one training epoch.

    The epoch is timed on a throwaway copy of ``net``.
    """
    cfg = cfg or TrainConfig()
    epoch_repeats = repeats if epoch_repeats is None else epoch_repeats
    x = dataset.segments(None, net.config.normalize)
    y = dataset.labels
    with threadpool_limits(limits=1):
        xi = core.interleave(x[:1])
        forward_trace(net, xi, "eval")
        lat = []
        for r in range(repeats):
            xi = core.interleave(x[r % len(x)][None])
            t0 = time.perf_counter()
            forward_trace(net, xi, "eval")
            lat.append(time.perf_counter() - t0)
        work = net.copy()
        state = RMSPropState.zeros_like(work.parameters())
        rng = np.random.default_rng(cfg.seed)
        masks = work.parameter_masks()
        ep = []
        for _ in range(epoch_repeats):
            t0 = time.perf_counter()
            train_epoch(work, x, y, cfg, state, rng, masks)
            ep.append(time.perf_counter() - t0)
    lat, ep = np.array(lat), np.array(ep)
    return {
        "inference_ms_mean": float(lat.mean() * 1e3),
        "inference_ms_std": float(lat.std() * 1e3),
        "inference_trials": int(len(lat)),
        "epoch_s_mean": float(ep.mean()),
        "epoch_s_std": float(ep.std()),
        "epoch_trials": int(len(ep)),
        "n_segments": int(len(y)),
        "batch_size": cfg.batch_size,
        "machine": machine_descriptor(),
    }
