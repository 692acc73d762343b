"""Gradient-weighted attribution over TiSc embedding trees.

Every scale of a TiSc layer is a one-wide feature map, so there is no
channel pooling step: relevance of node ``(scale, offset)`` is the clamped
product of its activation with the gradient of the chosen class score
(``max(0, a * d score / d a)``). A pure gradient-magnitude mode is also
available. Scores are pre-softmax logits.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core
from .data import SegmentDataset
from .errors import DataError
from .grad import backprop
from .model import Network, TiScInputLayer, forward_trace, prepare_input

__all__ = [
    "SaliencyMap",
    "CumulativeSaliency",
    "layer_labels",
    "gradcam",
    "gradcam_batch",
    "cumulative",
    "write_saliency_csv",
    "write_cumulative_csv",
    "export_waveforms",
    "import_waveforms",
]

MODES = ("grad_x_act", "grad")


def layer_labels(net: Network) -> list[str]:
    labels = []
    for s, stack in enumerate(net.stacks):
        for j in range(len(stack)):
            labels.append(f"ch{s}/input" if j == 0 else f"ch{s}/hidden{j}")
    return labels


def _layer_scales(layer):
    return layer.scales if isinstance(layer, TiScInputLayer) else layer.out_scales


@dataclass
class SaliencyMap:
    layer: str
    scales: core.ScaleRange
    segment_length: int
    values: np.ndarray  # tree-shaped, zero outside ``scales``
    target_class: int
    normalization: str = "raw"

    def per_scale(self) -> dict:
        return {
            lam: float(self.values[core.scale_block(self.segment_length, lam)].sum())
            for lam in self.scales
        }

    def rows(self, n_channels: int = 1):
        L = self.segment_length
        for lam in self.scales:
            for i in range(L >> lam):
                lo, hi = core.receptive_field(L, lam, i)
                yield (self.layer, lam, i, lo, hi,
                       float(self.values[core.node_index(L, lam, i)]))


def gradcam_batch(net: Network, xi: np.ndarray, classes, mode: str = "grad_x_act"):
    """Relevance trees for an interleaved batch.

    Returns ``(relevance, logits)`` where ``relevance`` is a list (one entry
    per TiSc layer, in :func:`layer_labels` order) of ``(B, tree)`` arrays.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    trace = forward_trace(net, xi, "eval")
    classes = np.broadcast_to(np.asarray(classes), (xi.shape[0],))
    C = net.config.num_classes
    if np.any(classes < 0) or np.any(classes >= C):
        raise DataError(f"target class out of range [0, {C})")
    seed = np.zeros_like(trace.logits)
    seed[np.arange(len(classes)), classes] = 1.0
    tape = backprop(net, trace, seed)
    L = xi.shape[-1]
    out = []
    for stack, traces, grads in zip(net.stacks, trace.layers, tape.layer_output_grads):
        for layer, lt, g in zip(stack, traces, grads):
            scales = _layer_scales(layer)
            if mode == "grad_x_act":
                rel = np.maximum(lt.outputs.values * g, 0.0)
            else:
                rel = np.abs(g)
            rel = rel * core.stored_mask(L, scales)
            out.append(rel)
    return out, trace.logits


def gradcam(net: Network, segment, target_class: int, mode: str = "grad_x_act",
            normalize: bool = False) -> list[SaliencyMap]:
    """Per-layer saliency maps for one ``(C, T)`` segment (eval mode)."""
    xi, _ = prepare_input(net, np.asarray(segment)[None] if np.ndim(segment) == 2 else segment)
    if xi.shape[0] != 1:
        raise DataError("gradcam takes a single segment")
    rel, _ = gradcam_batch(net, xi, [target_class], mode)
    maps = []
    layers = [layer for stack in net.stacks for layer in stack]
    for label, layer, r in zip(layer_labels(net), layers, rel):
        v = r[0]
        tag = "raw"
        if normalize:
            peak = v.max()
            v = v / peak if peak > 0 else v
            tag = "max-1"
        maps.append(SaliencyMap(label, _layer_scales(layer), xi.shape[-1], v, int(target_class), tag))
    return maps


@dataclass
class CumulativeSaliency:
    """Per-(layer, scale) relevance summed over a dataset."""

    totals: dict  # {layer: {scale: total}}
    count: int
    class_mode: str = "predicted"
    _parts: dict = field(default_factory=dict, repr=False)

    def mean(self) -> dict:
        return {lay: {lam: t / self.count for lam, t in d.items()} for lay, d in self.totals.items()}

    def argmax_scale(self, layer: str) -> int:
        d = self.totals[layer]
        return max(d, key=d.get)

    def __add__(self, other: "CumulativeSaliency") -> "CumulativeSaliency":
        if set(self.totals) != set(other.totals):
            raise DataError("cannot add cumulative maps over different layers")
        parts = {k: self._parts[k] + other._parts[k] for k in self._parts}
        return _from_parts(parts, self.count + other.count, self.class_mode)


def _from_parts(parts: dict, count: int, class_mode: str) -> CumulativeSaliency:
    totals = {}
    for (lay, lam), vals in parts.items():
        totals.setdefault(lay, {})[lam] = math.fsum(vals)
    return CumulativeSaliency(totals, count, class_mode, parts)


def cumulative(net: Network, dataset: SegmentDataset, class_mode: str = "predicted",
               mode: str = "grad_x_act", batch_size: int = 512) -> CumulativeSaliency:
    """Sum per-example relevance per scale over ``dataset``.

    Totals are exactly rounded sums (``math.fsum``) of per-example per-scale
    sums, so they do not depend on dataset order.
    """
    if len(dataset) == 0:
        raise DataError("cumulative saliency needs a non-empty dataset")
    if class_mode not in ("predicted", "true"):
        raise ValueError("class_mode must be 'predicted' or 'true'")
    labels = layer_labels(net)
    layers = [layer for stack in net.stacks for layer in stack]
    parts = {(lab, lam): [] for lab, layer in zip(labels, layers) for lam in _layer_scales(layer)}
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        xi, _ = prepare_input(net, dataset.segments(idx, net.config.normalize))
        if class_mode == "true":
            cls = dataset.labels[idx]
        else:
            cls = forward_trace(net, xi, "eval").logits.argmax(axis=1)
        rel, _ = gradcam_batch(net, xi, cls, mode)
        L = xi.shape[-1]
        for lab, layer, r in zip(labels, layers, rel):
            for lam in _layer_scales(layer):
                parts[(lab, lam)].extend(r[:, core.scale_block(L, lam)].sum(axis=1).tolist())
    return _from_parts(parts, len(dataset), class_mode)


SALIENCY_COLUMNS = ("layer", "scale", "offset", "t_start_sample", "t_end_sample", "relevance")
CUMULATIVE_COLUMNS = ("layer", "scale", "total", "mean")


def write_saliency_csv(maps, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SALIENCY_COLUMNS)
        for m in maps:
            for row in m.rows():
                w.writerow(row[:5] + (repr(row[5]),))


def write_cumulative_csv(cum: CumulativeSaliency, path):
    means = cum.mean()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CUMULATIVE_COLUMNS)
        for lay, d in cum.totals.items():
            for lam, t in d.items():
                w.writerow([lay, lam, repr(t), repr(means[lay][lam])])


def export_waveforms(net: Network, directory) -> list[Path]:
    """Write learned kernels, one CSV per TiSc layer: ``scale,tap,weight``.

    Weights are written with ``repr`` so they parse back bit-exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for s, stack in enumerate(net.stacks):
        for j, layer in enumerate(stack):
            name = "input" if j == 0 else f"hidden{j}"
            path = directory / f"waveforms_ch{s}_{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("scale", "tap", "weight"))
                for lam in _layer_scales(layer):
                    for t, v in enumerate(layer.kernel(lam)):
                        w.writerow((lam, t, repr(float(v))))
            paths.append(path)
    return paths


def import_waveforms(path) -> dict:
    """Read an exported waveform CSV back into ``{scale: kernel}``."""
    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(int(rec["scale"]), []).append((int(rec["tap"]), float(rec["weight"])))
    return {lam: np.array([v for _, v in sorted(taps)]) for lam, taps in rows.items()}
