"""Time-scale layers: flat heap layout, tree indexing and forward passes.

Notation used throughout:

* ``L`` is the (interleaved) segment length, always a power of two.
* A *scale* ``lam`` owns non-overlapping windows of ``2**lam`` samples, so
  there are ``L >> lam`` windows (offsets) at that scale.
* Input-layer kernels live in one flat vector laid out like a binary heap:
  the kernel for scale ``lam`` occupies ``[2**lam - 1, 2**(lam+1) - 1)``.
* Activations live in an *embedding tree*, an inverted binary heap over
  ``(scale, offset)``: the root is the coarsest window, node ``j`` has
  children ``2j+1`` and ``2j+2`` (its two half windows).

All arrays may carry arbitrary leading batch dimensions; the tree / sample
axis is always the last one.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ScaleRangeError

__all__ = [
    "ActivationKind",
    "ScaleRange",
    "EmbeddingTree",
    "TiScInputLayer",
    "TiScHiddenLayer",
    "is_power_of_two",
    "log2_exact",
    "weight_slice",
    "tree_size",
    "scale_block",
    "node_index",
    "node_location",
    "children",
    "parent",
    "receptive_field",
    "channel_interval",
    "interleave",
    "deinterleave",
    "hidden_kernel_support",
    "kernel_length",
    "preactivate_input",
    "forward_input",
    "naive_forward",
    "preactivate_hidden",
    "forward_hidden",
    "naive_forward_hidden",
    "stored_mask",
]


def is_power_of_two(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n > 0 and (n & (n - 1)) == 0


def log2_exact(n: int) -> int:
    if not is_power_of_two(n):
        raise DataError(f"length {n} is not a power of two")
    return int(n).bit_length() - 1


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self is ActivationKind.RELU:
            return np.maximum(z, 0.0)
        if self is ActivationKind.TANH:
            return np.tanh(z)
        return z.copy()

    def derivative(self, z: np.ndarray) -> np.ndarray:
        """Derivative evaluated at the pre-activation ``z``."""
        if self is ActivationKind.RELU:
            return (z > 0).astype(z.dtype)
        if self is ActivationKind.TANH:
            return 1.0 - np.tanh(z) ** 2
        return np.ones_like(z)


@dataclass(frozen=True)
class ScaleRange:
    """Inclusive integer range of scales ``[lambda_min, lambda_max]``."""

    lambda_min: int
    lambda_max: int

    def __post_init__(self):
        if int(self.lambda_min) != self.lambda_min or int(self.lambda_max) != self.lambda_max:
            raise ConfigError(f"scales must be integers, got {self}")
        if not 1 <= self.lambda_min <= self.lambda_max:
            raise ConfigError(
                f"need 1 <= lambda_min <= lambda_max, got [{self.lambda_min}, {self.lambda_max}]"
            )

    @classmethod
    def of(cls, value) -> "ScaleRange":
        """Coerce ``ScaleRange``, ``[lo, hi]``, ``[lam]`` or ``lam``."""
        if isinstance(value, ScaleRange):
            return value
        if isinstance(value, dict):
            return cls(int(value["lambda_min"]), int(value["lambda_max"]))
        if isinstance(value, (int, np.integer)):
            return cls(int(value), int(value))
        value = list(value)
        if len(value) == 1:
            return cls(int(value[0]), int(value[0]))
        if len(value) != 2:
            raise ConfigError(f"cannot interpret {value!r} as a scale range")
        return cls(int(value[0]), int(value[1]))

    @property
    def scales(self) -> range:
        return range(self.lambda_min, self.lambda_max + 1)

    def __iter__(self):
        return iter(self.scales)

    def __len__(self) -> int:
        return self.lambda_max - self.lambda_min + 1

    def __contains__(self, lam) -> bool:
        return self.lambda_min <= lam <= self.lambda_max

    def check_length(self, L: int) -> int:
        """Validate against segment length ``L``; return ``log2(L)``."""
        n = log2_exact(L)
        if self.lambda_max > n:
            raise ConfigError(
                f"lambda_max={self.lambda_max} exceeds log2(L)={n} for L={L}"
            )
        return n

    def to_list(self) -> list[int]:
        return [self.lambda_min, self.lambda_max]


# -- heap / tree index arithmetic -------------------------------------------


def weight_slice(scales: ScaleRange, lam: int) -> slice:
    """Slice of the flat kernel vector holding the scale-``lam`` kernel."""
    if lam not in scales:
        raise ScaleRangeError(f"scale {lam} outside [{scales.lambda_min}, {scales.lambda_max}]")
    w = 1 << lam
    return slice(w - 1, 2 * w - 1)


def tree_size(L: int, scales: ScaleRange) -> int:
    return 2 * (L >> scales.lambda_min) - 1


def scale_block(L: int, lam: int) -> slice:
    """Contiguous tree slots holding every offset of scale ``lam``."""
    n = L >> lam
    return slice(n - 1, 2 * n - 1)


def node_index(L: int, lam: int, i: int) -> int:
    if lam < 0 or (1 << lam) > L:
        raise ScaleRangeError(f"scale {lam} invalid for L={L}")
    n = L >> lam
    if not 0 <= i < n:
        raise ScaleRangeError(f"offset {i} out of range [0, {n}) at scale {lam}")
    return i + n - 1


def node_location(L: int, j: int) -> tuple[int, int]:
    """Inverse of :func:`node_index`: tree slot -> ``(scale, offset)``."""
    n_top = log2_exact(L)
    j = int(j)
    if j < 0:
        raise ScaleRangeError(f"negative tree index {j}")
    depth = (j + 1).bit_length() - 1
    lam = n_top - depth
    if lam < 0:
        raise ScaleRangeError(f"tree index {j} is below scale 0 for L={L}")
    return lam, j - ((1 << depth) - 1)


def children(j: int) -> tuple[int, int]:
    return 2 * j + 1, 2 * j + 2


def parent(j: int) -> int:
    if j <= 0:
        raise ScaleRangeError("the root has no parent")
    return (j - 1) // 2


def receptive_field(L: int, lam: int, i: int) -> tuple[int, int]:
    """Half-open interleaved-sample interval covered by node ``(lam, i)``."""
    node_index(L, lam, i)
    w = 1 << lam
    return i * w, (i + 1) * w


def channel_interval(L: int, lam: int, i: int, n_channels: int) -> tuple[float, float]:
    """Per-channel time interval of ``(lam, i)`` after de-interleaving."""
    start, stop = receptive_field(L, lam, i)
    return start / n_channels, stop / n_channels


def interleave(channels) -> np.ndarray:
    """Merge ``C`` equal-length channels sample by sample.

    ``out[..., n*C + c] == channels[..., c, n]``. Accepts a list of 1-D arrays
    or an array of shape ``(..., C, T)``.
    """
    x = np.asarray(channels)
    if x.ndim < 2:
        raise DataError("interleave expects at least a (C, T) array")
    C = x.shape[-2]
    if not is_power_of_two(C):
        raise DataError(
            f"{C} channels is not a power of two; pad with all-zero dummy "
            f"channels up to {1 << max(C - 1, 0).bit_length()}"
        )
    return np.swapaxes(x, -1, -2).reshape(*x.shape[:-2], -1)


def deinterleave(x: np.ndarray, n_channels: int) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] % n_channels:
        raise DataError(f"length {x.shape[-1]} not divisible by {n_channels} channels")
    return np.swapaxes(x.reshape(*x.shape[:-1], -1, n_channels), -1, -2)


# -- layers -------------------------------------------------------------------


@dataclass
class EmbeddingTree:
    """Activations over ``(scale, offset)`` stored as an inverted binary heap."""

    values: np.ndarray
    segment_length: int
    scales: ScaleRange

    def block(self, lam: int) -> np.ndarray:
        if lam not in self.scales:
            raise ScaleRangeError(f"scale {lam} not stored in this tree")
        return self.values[..., scale_block(self.segment_length, lam)]

    def at(self, lam: int, i: int):
        return self.values[..., node_index(self.segment_length, lam, i)]


def stored_mask(L: int, scales: ScaleRange) -> np.ndarray:
    """Boolean mask of tree slots that belong to a scale in ``scales``."""
    mask = np.zeros(tree_size(L, scales), dtype=bool)
    mask[(L >> scales.lambda_max) - 1:] = True
    return mask


@dataclass
class TiScInputLayer:
    scales: ScaleRange
    weights: np.ndarray
    biases: np.ndarray
    activation: ActivationKind = ActivationKind.RELU

    def __post_init__(self):
        self.activation = ActivationKind(self.activation)
        if self.weights.shape != (2 ** (self.scales.lambda_max + 1) - 1,):
            raise ConfigError(f"weight vector has shape {self.weights.shape}")
        if self.biases.shape != (len(self.scales),):
            raise ConfigError(f"bias vector has shape {self.biases.shape}")

    def kernel(self, lam: int) -> np.ndarray:
        return self.weights[weight_slice(self.scales, lam)]

    def bias(self, lam: int):
        return self.biases[lam - self.scales.lambda_min]

    def weight_mask(self) -> np.ndarray:
        """True for learnable weights, False for placeholder slots."""
        mask = np.zeros(self.weights.shape, dtype=bool)
        mask[(1 << self.scales.lambda_min) - 1:] = True
        return mask


def hidden_kernel_support(in_scales: ScaleRange, lam_h: int) -> list[tuple[int, int]]:
    """Upstream ``(scale, relative offset)`` nodes inside one ``2**lam_h`` window.

    Ordered scale-major, offset-ascending; this order is the layout of every
    hidden kernel.
    """
    if lam_h < in_scales.lambda_min:
        raise ScaleRangeError(f"scale {lam_h} below input lambda_min={in_scales.lambda_min}")
    return [
        (lam, k)
        for lam in range(in_scales.lambda_min, min(in_scales.lambda_max, lam_h) + 1)
        for k in range(1 << (lam_h - lam))
    ]


def kernel_length(in_scales: ScaleRange, lam_h: int) -> int:
    top = min(in_scales.lambda_max, lam_h)
    return sum(1 << (lam_h - lam) for lam in range(in_scales.lambda_min, top + 1))


@dataclass
class TiScHiddenLayer:
    in_scales: ScaleRange
    out_scales: ScaleRange
    kernels: list = field(default_factory=list)
    biases: np.ndarray = None
    activation: ActivationKind = ActivationKind.IDENTITY

    def __post_init__(self):
        self.activation = ActivationKind(self.activation)
        if self.out_scales.lambda_min < self.in_scales.lambda_min + 1:
            raise ConfigError(
                f"hidden lambda_min={self.out_scales.lambda_min} must be at least "
                f"input lambda_min + 1 = {self.in_scales.lambda_min + 1}"
            )
        if self.out_scales.lambda_max > self.in_scales.lambda_max:
            raise ConfigError(
                f"hidden lambda_max={self.out_scales.lambda_max} exceeds input "
                f"lambda_max={self.in_scales.lambda_max}"
            )
        if len(self.kernels) != len(self.out_scales):
            raise ConfigError("need one kernel per output scale")
        for lam, k in zip(self.out_scales, self.kernels):
            if k.shape != (kernel_length(self.in_scales, lam),):
                raise ConfigError(f"kernel for scale {lam} has shape {k.shape}")
        if self.biases is None or self.biases.shape != (len(self.out_scales),):
            raise ConfigError("need one bias per output scale")

    def kernel(self, lam: int) -> np.ndarray:
        if lam not in self.out_scales:
            raise ScaleRangeError(f"scale {lam} not an output scale")
        return self.kernels[lam - self.out_scales.lambda_min]


# -- forward passes ----------------------------------------------------------


def _check_input(layer: TiScInputLayer, x: np.ndarray) -> int:
    L = x.shape[-1]
    layer.scales.check_length(L)
    return L


def preactivate_input(layer: TiScInputLayer, x) -> np.ndarray:
    """Pre-activation tree of the input layer (one matmul per scale)."""
    x = np.asarray(x)
    L = _check_input(layer, x)
    dtype = np.result_type(x, layer.weights)
    out = np.zeros(x.shape[:-1] + (tree_size(L, layer.scales),), dtype=dtype)
    for lam in layer.scales:
        w = 1 << lam
        rows = x.reshape(*x.shape[:-1], L // w, w)
        out[..., scale_block(L, lam)] = rows @ layer.kernel(lam) + layer.bias(lam)
    return out


def forward_input(layer: TiScInputLayer, x) -> EmbeddingTree:
    x = np.asarray(x)
    pre = preactivate_input(layer, x)
    L = x.shape[-1]
    return EmbeddingTree(_activate(layer.activation, pre, L, layer.scales), L, layer.scales)


def _activate(kind: ActivationKind, pre: np.ndarray, L: int, scales: ScaleRange) -> np.ndarray:
    out = np.zeros_like(pre)
    live = slice((L >> scales.lambda_max) - 1, None)
    out[..., live] = kind.apply(pre[..., live])
    return out


def naive_forward(layer: TiScInputLayer, x) -> EmbeddingTree:
    """Reference input layer: windows gathered and dotted one at a time."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DataError("naive_forward takes a single segment")
    L = _check_input(layer, x)
    out = np.zeros(tree_size(L, layer.scales))
    for lam in layer.scales:
        w = 1 << lam
        k = layer.kernel(lam)
        for i in range(L // w):
            acc = 0.0
            for t in range(w):
                acc += k[t] * x[i * w + t]
            z = np.array(acc + layer.bias(lam))
            out[node_index(L, lam, i)] = layer.activation.apply(z)
    return EmbeddingTree(out, L, layer.scales)


def _check_tree(layer: TiScHiddenLayer, e: EmbeddingTree) -> int:
    if e.scales != layer.in_scales:
        raise ScaleRangeError(f"tree scales {e.scales} do not match layer input {layer.in_scales}")
    L = e.segment_length
    if e.values.shape[-1] != tree_size(L, e.scales):
        raise DataError("tree length does not match its segment length and scales")
    return L


def preactivate_hidden(layer: TiScHiddenLayer, e: EmbeddingTree) -> np.ndarray:
    L = _check_tree(layer, e)
    v = e.values
    out = np.zeros(v.shape[:-1] + (tree_size(L, layer.out_scales),), dtype=v.dtype)
    for lam_h, kern in zip(layer.out_scales, layer.kernels):
        n_out = L >> lam_h
        acc = np.full(v.shape[:-1] + (n_out,), layer.biases[lam_h - layer.out_scales.lambda_min], dtype=v.dtype)
        pos = 0
        for lam in range(layer.in_scales.lambda_min, min(layer.in_scales.lambda_max, lam_h) + 1):
            span = 1 << (lam_h - lam)
            rows = v[..., scale_block(L, lam)].reshape(*v.shape[:-1], n_out, span)
            acc += rows @ kern[pos:pos + span]
            pos += span
        out[..., scale_block(L, lam_h)] = acc
    return out


def forward_hidden(layer: TiScHiddenLayer, e: EmbeddingTree) -> EmbeddingTree:
    pre = preactivate_hidden(layer, e)
    L = e.segment_length
    return EmbeddingTree(_activate(layer.activation, pre, L, layer.out_scales), L, layer.out_scales)


def naive_forward_hidden(layer: TiScHiddenLayer, e: EmbeddingTree) -> EmbeddingTree:
    """Reference hidden layer using an explicit receptive-field containment test."""
    L = _check_tree(layer, e)
    v = np.asarray(e.values, dtype=float)
    if v.ndim != 1:
        raise DataError("naive_forward_hidden takes a single tree")
    out = np.zeros(tree_size(L, layer.out_scales))
    for lam_h in layer.out_scales:
        kern = layer.kernel(lam_h)
        b = layer.biases[lam_h - layer.out_scales.lambda_min]
        for i in range(L >> lam_h):
            lo, hi = receptive_field(L, lam_h, i)
            gathered = []
            for lam in layer.in_scales:
                for j in range(L >> lam):
                    a, z = receptive_field(L, lam, j)
                    if lo <= a and z <= hi:
                        gathered.append(v[node_index(L, lam, j)])
            acc = 0.0
            for wt, val in zip(kern, gathered, strict=True):
                acc += wt * val
            out[node_index(L, lam_h, i)] = layer.activation.apply(np.array(acc + b))
    return EmbeddingTree(out, L, layer.out_scales)
