"""Synthesize a burst task, cross-validate a small network and inspect it.

Run from the repository root::

    python3 demos/quickstart.py
"""
import numpy as np

from tisc import data, model, train
from tisc.data import SynthSpec
from tisc.model import NetworkConfig
from tisc.train import TrainConfig


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def main():
    # class 1 carries a 128-sample Gabor burst at a grid-aligned window
    ds = data.synthesize(SynthSpec(n_per_class=300, seg_len=1024, burst_scale=7, amplitude=3.0, seed=0))
    print(f"dataset: {ds.n_segments} segments, {ds.n_channels} channel(s) x {ds.seg_len} samples")

    cfg = NetworkConfig(segment_length=1024, input_scales=[4, 9], hidden_stack=[[5, 9]])
    costs = model.count_costs(cfg)
    print(f"network: {costs.active_params} active parameters, {costs.macs_total} MACs per segment")

    nets, metrics, plan = train.fit(model.build(cfg, 0), ds, TrainConfig(max_epochs=15, folds=3, seed=0))
    for k, f in enumerate(metrics.folds):
        print(f"fold {k}: {len(f.train_loss)} epochs, best val acc {max(f.val_accuracy):.3f}, "
              f"test acc {f.test_accuracy:.3f}")
    print("summary:", metrics.summary())

    test = ds.subset(plan.test)
    x = test.segments()
    probs = np.mean([softmax(model.forward(n, x)) for n in nets], axis=0)
    print(f"fold-ensemble test accuracy: {(probs.argmax(1) == test.labels).mean():.3f}")


if __name__ == "__main__":
    main()
