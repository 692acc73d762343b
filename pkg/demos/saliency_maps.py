"""Train on the burst task, then ask which time scales the network relies on.

Run from the repository root::

    python3 demos/saliency_maps.py
"""
from tisc import core, data, model, saliency, train
from tisc.data import SynthSpec
from tisc.model import NetworkConfig
from tisc.train import TrainConfig


def bar(v, vmax, width=40):
    return "#" * int(round(width * v / vmax)) if vmax > 0 else ""


def main():
    ds = data.synthesize(SynthSpec(n_per_class=300, seg_len=1024, burst_scale=7, amplitude=3.0, seed=1))
    cfg = NetworkConfig(segment_length=1024, input_scales=[4, 9], hidden_stack=[[5, 9]])
    nets, metrics, plan = train.fit(model.build(cfg, 1), ds, TrainConfig(max_epochs=20, folds=3, seed=1))
    print(f"mean test accuracy {metrics.summary()['test_accuracy_mean']:.3f}")

    test = ds.subset(plan.test)
    total = None
    for net in nets:
        cum = saliency.cumulative(net, test, "predicted")
        total = cum if total is None else total + cum
    for layer, per_scale in total.totals.items():
        vmax = max(per_scale.values())
        print(f"\n{layer}: cumulative relevance per scale (burst spans 2^7 samples)")
        for lam, t in sorted(per_scale.items()):
            print(f"  scale {lam}: {t:12.4g} {bar(t, vmax)}")

    # one burst-carrying segment: where along time does the relevance sit
    i = int(plan.test[test.labels == 1][0])
    maps = saliency.gradcam(nets[0], ds.subset([i]).segments()[0], 1)
    m = maps[0]
    lam = 7
    row = m.values[core.scale_block(m.segment_length, lam)]
    print(f"\nsegment {i}, {m.layer}, scale {lam} windows:")
    for j, v in enumerate(row):
        lo, hi = j << lam, (j + 1) << lam
        print(f"  [{lo:4d}, {hi:4d}) {v:10.4g} {bar(v, row.max())}")


if __name__ == "__main__":
    main()
