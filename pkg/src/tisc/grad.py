"""Reverse-mode gradients for TiSc layers, the dense head and the full network.

Every ``backward_*`` function takes the forward inputs, the cached
pre-activation and the gradient with respect to the layer *output*, and
returns ``(parameter gradients, input gradient)``. Parameter gradients are
summed over any leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import EmbeddingTree, TiScHiddenLayer, TiScInputLayer
from .errors import DataError
from .model import DenseHead, ForwardTrace, Network, forward_trace

__all__ = [
    "GradientTape",
    "GradCheckReport",
    "backward_input",
    "backward_hidden",
    "backward_dense",
    "softmax_cross_entropy",
    "backprop",
    "loss_and_grads",
    "grad_check",
]


def _delta(kind, pre, upstream, L, scales):
    if upstream.shape != pre.shape:
        raise DataError(f"upstream gradient shape {upstream.shape} != {pre.shape}")
    delta = np.zeros_like(pre)
    live = slice((L >> scales.lambda_max) - 1, None)
    delta[..., live] = upstream[..., live] * kind.derivative(pre[..., live])
    return delta


def backward_input(layer: TiScInputLayer, x, pre, upstream):
    """Adjoint of the input layer.

    Returns ``((d_weights, d_biases), d_x)``; placeholder weight slots always
    receive zero.
    """
    x = np.asarray(x)
    L = x.shape[-1]
    delta = _delta(layer.activation, pre, np.asarray(upstream), L, layer.scales)
    dw = np.zeros_like(layer.weights, dtype=delta.dtype)
    db = np.zeros_like(layer.biases, dtype=delta.dtype)
    dx = np.zeros(x.shape, dtype=delta.dtype)
    lead = x.shape[:-1]
    for lam in layer.scales:
        w = 1 << lam
        d = delta[..., core.scale_block(L, lam)]  # (..., n)
        rows = x.reshape(*lead, L // w, w)
        dw[core.weight_slice(layer.scales, lam)] = np.einsum(
            "bn,bnw->w", d.reshape(-1, L // w), rows.reshape(-1, L // w, w)
        )
        db[lam - layer.scales.lambda_min] = d.sum()
        dx += (d[..., None] * layer.kernel(lam)).reshape(x.shape)
    return (dw, db), dx


def backward_hidden(layer: TiScHiddenLayer, e: EmbeddingTree, pre, upstream):
    """Adjoint of the hidden layer: gather transposed into a scatter-add."""
    L = e.segment_length
    v = e.values
    delta = _delta(layer.activation, pre, np.asarray(upstream), L, layer.out_scales)
    dk = []
    db = np.zeros_like(layer.biases, dtype=delta.dtype)
    de = np.zeros(v.shape, dtype=delta.dtype)
    lead = v.shape[:-1]
    for lam_h, kern in zip(layer.out_scales, layer.kernels):
        n_out = L >> lam_h
        d = delta[..., core.scale_block(L, lam_h)]
        db[lam_h - layer.out_scales.lambda_min] = d.sum()
        grads, pos = [], 0
        for lam in range(layer.in_scales.lambda_min, min(layer.in_scales.lambda_max, lam_h) + 1):
            span = 1 << (lam_h - lam)
            rows = v[..., core.scale_block(L, lam)].reshape(*lead, n_out, span)
            grads.append(np.einsum("bn,bns->s", d.reshape(-1, n_out), rows.reshape(-1, n_out, span)))
            blk = de[..., core.scale_block(L, lam)]
            blk += (d[..., None] * kern[pos:pos + span]).reshape(blk.shape)
            pos += span
        dk.append(np.concatenate(grads))
    return (dk, db), de


def backward_dense(head: DenseHead, features, upstream):
    """Affine adjoint. Returns ``((d_weights, d_biases), d_features)``."""
    features = np.asarray(features)
    upstream = np.asarray(upstream)
    f2 = features.reshape(-1, features.shape[-1])
    u2 = upstream.reshape(-1, upstream.shape[-1])
    return (f2.T @ u2, u2.sum(axis=0)), upstream @ head.weights.T


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy against integer labels and its fused gradient.

    The gradient with respect to the logits is ``(softmax - one_hot) / B``.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    targets = np.atleast_1d(np.asarray(targets))
    B, C = logits.shape
    if targets.shape != (B,):
        raise DataError(f"{targets.shape[0]} labels for {B} score rows")
    if np.any(targets < 0) or np.any(targets >= C):
        raise DataError(f"class index out of range [0, {C})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -logp[np.arange(B), targets].mean()
    grad = np.exp(logp)
    grad[np.arange(B), targets] -= 1.0
    return loss, grad / B


@dataclass
class GradientTape:
    """Gradients congruent with ``Network.parameters()`` plus the input gradient."""

    params: list
    input: np.ndarray | None = None
    layer_output_grads: list = field(default_factory=list)


def backprop(net: Network, trace: ForwardTrace, d_logits) -> GradientTape:
    """Reverse pass through head and every TiSc stack of ``trace``."""
    (dW, dbh), d_feat = backward_dense(net.head, trace.features, d_logits)
    L = trace.x.shape[-1]
    per_stack = net.config.features_per_stack
    stack_grads, dx_total, out_grads = [], np.zeros_like(trace.x, dtype=float), []
    for s, (stack, traces) in enumerate(zip(net.stacks, trace.layers)):
        last = traces[-1].outputs
        up = np.zeros_like(last.values, dtype=float)
        up[..., (L >> last.scales.lambda_max) - 1:] = d_feat[..., s * per_stack:(s + 1) * per_stack]
        grads_rev, outs_rev = [], []
        for layer, lt in zip(reversed(stack), reversed(traces)):
            outs_rev.append(up)
            if lt.dropout_mask is not None:
                up = up * lt.dropout_mask
            if isinstance(layer, TiScInputLayer):
                (dw, db), up = backward_input(layer, lt.inputs, lt.pre, up)
                grads_rev.append([dw, db])
            else:
                (dk, db), up = backward_hidden(layer, lt.inputs, lt.pre, up)
                grads_rev.append(list(dk) + [db])
        dx_total += up
        for g in reversed(grads_rev):
            stack_grads += g
        out_grads.append(list(reversed(outs_rev)))
    return GradientTape(stack_grads + [dW, dbh], dx_total, out_grads)


def loss_and_grads(net: Network, xi, labels, mode: str = "train", rng=None):
    """Mean cross-entropy over an interleaved batch and its parameter gradients.

    Returns ``(loss, tape, logits)``.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    trace = forward_trace(net, xi, mode, rng)
    loss, d_logits = softmax_cross_entropy(trace.logits, labels)
    return loss, backprop(net, trace, d_logits), trace.logits


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    failures: list  # (param index, flat index, analytic, numeric, rel error)
    floor: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(a, n, floor):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(net: Network, xi, labels, tolerance: float = 1e-4, h: float = 1e-5,
               floor: float | None = None, logit: int | None = None,
               max_failures: int = 20) -> GradCheckReport:
    """Compare every analytic parameter gradient with a central difference.

    Runs in eval mode (no dropout) on float64 parameters. The checked scalar
    is the mean cross-entropy, or the batch-summed score of class ``logit``
    when given. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.

    By default ``floor`` is the smallest gradient magnitude a central
    difference can resolve to ``tolerance``: rounding in the two loss
    evaluations contributes about ``eps * |f| / h`` to the numeric estimate,
    so ``floor = 10 * eps * max(|f|, 1) / (h * tolerance)`` (without the
    tolerance factor when it is zero). Smaller gradients are thereby compared
    on an absolute scale.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    if logit is None:
        _, tape, _ = loss_and_grads(net, xi, labels, mode="eval")
    else:
        trace = forward_trace(net, xi, "eval")
        seed = np.zeros_like(trace.logits)
        seed[:, logit] = 1.0
        tape = backprop(net, trace, seed)

    def loss_at():
        logits = forward_trace(net, xi, "eval").logits
        if logit is not None:
            return logits[:, logit].sum()
        return softmax_cross_entropy(logits, labels)[0]

    if floor is None:
        f0 = abs(float(loss_at()))
        floor = 10 * np.finfo(np.float64).eps * max(f0, 1.0) / h
        if tolerance > 0:
            floor /= tolerance
    worst, count, failures = 0.0, 0, []
    for pi, (p, g) in enumerate(zip(net.parameters(), tape.params)):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_at()
            flat[k] = orig - h
            down = loss_at()
            flat[k] = orig
            num = (up - down) / (2 * h)
            err = float(_rel_error(gflat[k], num, floor))
            count += 1
            worst = max(worst, err)
            if err >= tolerance and len(failures) < max_failures:
                failures.append((pi, k, float(gflat[k]), float(num), err))
    return GradCheckReport(worst, count, tolerance, failures, float(floor))
