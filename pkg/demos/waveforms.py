"""Export learned kernels to CSV and print a coarse text rendering.

Run from the repository root::

    python3 demos/waveforms.py [OUT_DIR]
"""
import sys
from pathlib import Path

import numpy as np

from tisc import data, model, saliency, train
from tisc.data import SynthSpec
from tisc.model import NetworkConfig
from tisc.train import TrainConfig

LEVELS = " .:-=+*#%@"


def sparkline(k, width=64):
    k = np.asarray(k, dtype=float)
    if len(k) > width:
        k = k[: len(k) // width * width].reshape(width, -1).mean(axis=1)
    span = np.ptp(k) or 1.0
    idx = ((k - k.min()) / span * (len(LEVELS) - 1)).round().astype(int)
    return "".join(LEVELS[i] for i in idx)


def main(out):
    ds = data.synthesize(SynthSpec(n_per_class=300, seg_len=1024, burst_scale=7, amplitude=3.0, seed=2))
    cfg = NetworkConfig(segment_length=1024, input_scales=[4, 9], hidden_stack=[[5, 9]])
    nets, _, _ = train.fit(model.build(cfg, 2), ds, TrainConfig(max_epochs=20, folds=2, seed=2))
    paths = saliency.export_waveforms(nets[0], out)
    for p in paths:
        print(f"wrote {p}")
    kernels = saliency.import_waveforms(paths[0])
    print("\ninput-layer kernels:")
    for lam, k in sorted(kernels.items()):
        print(f"  scale {lam} ({len(k):3d} taps) {sparkline(k)}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/waveforms"))
