"""Network assembly: parallel TiSc stacks feeding a dense one-hot head.

A network holds ``num_tisc_channels`` independent stacks. Each stack sees the
same interleaved segment and consists of one input layer followed by zero or
more hidden layers. The head consumes the out-scale activations of the last
layer of every stack, concatenated stack by stack; inside one stack the
features are ordered as the tree stores them (coarsest scale first, then
offset ascending).
"""
from __future__ import annotations

import copy
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .core import (
    ActivationKind,
    EmbeddingTree,
    ScaleRange,
    TiScHiddenLayer,
    TiScInputLayer,
    kernel_length,
)
from .errors import ChecksumError, ConfigError, DataError, FormatError, TruncatedFileError, VersionError

MODEL_MAGIC = b"TSCM"
MODEL_FORMAT_VERSION = 1
# bump when the layout of hidden-kernel supports changes
SUPPORT_ORDER_VERSION = 1
SUPPORT_ORDER = "scale-major/offset-ascending"


@dataclass
class NetworkConfig:
    """Architecture description.

    ``segment_length`` is the per-channel length; the network operates on the
    interleaved length ``segment_length * num_data_channels``. ``normalize``
    records whether inputs are z-scored per segment and channel before the
    forward pass.
    """

    segment_length: int
    num_data_channels: int = 1
    num_tisc_channels: int = 1
    input_scales: ScaleRange = field(default_factory=lambda: ScaleRange(1, 1))
    hidden_stack: list = field(default_factory=list)
    activation: ActivationKind = ActivationKind.RELU
    dropout_rate: float = 0.05
    num_classes: int = 2
    normalize: bool = True

    def __post_init__(self):
        self.input_scales = ScaleRange.of(self.input_scales)
        self.hidden_stack = [ScaleRange.of(s) for s in self.hidden_stack]
        self.activation = ActivationKind(self.activation)
        self.validate()

    @property
    def interleaved_length(self) -> int:
        return self.segment_length * self.num_data_channels

    def validate(self):
        if not core.is_power_of_two(self.num_data_channels):
            raise ConfigError(
                f"num_data_channels={self.num_data_channels} is not a power of two; "
                "add all-zero dummy channels"
            )
        if not core.is_power_of_two(self.interleaved_length):
            raise ConfigError(
                f"interleaved length {self.interleaved_length} is not a power of two"
            )
        self.input_scales.check_length(self.interleaved_length)
        prev = self.input_scales
        for k, hs in enumerate(self.hidden_stack):
            if hs.lambda_min < prev.lambda_min + 1:
                raise ConfigError(
                    f"hidden layer {k}: lambda_min={hs.lambda_min} must be >= {prev.lambda_min + 1}"
                )
            if hs.lambda_max > prev.lambda_max:
                raise ConfigError(
                    f"hidden layer {k}: lambda_max={hs.lambda_max} exceeds {prev.lambda_max}"
                )
            prev = hs
        if self.num_tisc_channels < 1:
            raise ConfigError("num_tisc_channels must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate={self.dropout_rate} not in [0, 1)")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def last_scales(self) -> ScaleRange:
        return self.hidden_stack[-1] if self.hidden_stack else self.input_scales

    @property
    def features_per_stack(self) -> int:
        L = self.interleaved_length
        s = self.last_scales
        return sum(L >> lam for lam in s)

    @property
    def head_inputs(self) -> int:
        return self.num_tisc_channels * self.features_per_stack

    def layer_activations(self) -> list[ActivationKind]:
        """Activation of every layer in one stack; the last hidden layer is linear."""
        acts = [self.activation] * (1 + len(self.hidden_stack))
        if self.hidden_stack:
            acts[-1] = ActivationKind.IDENTITY
        return acts

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_scales"] = self.input_scales.to_list()
        d["hidden_stack"] = [s.to_list() for s in self.hidden_stack]
        d["activation"] = self.activation.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid network config: {exc}") from exc


@dataclass
class DenseHead:
    weights: np.ndarray  # (inputs, classes)
    biases: np.ndarray  # (classes,)

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights + self.biases


@dataclass
class Network:
    config: NetworkConfig
    stacks: list  # list[list[TiScInputLayer | TiScHiddenLayer]]
    head: DenseHead
    seed: int | None = None

    def parameters(self) -> list[np.ndarray]:
        """Every parameter array in serialization order (live references)."""
        params = []
        for stack in self.stacks:
            inp = stack[0]
            params += [inp.weights, inp.biases]
            for layer in stack[1:]:
                params += list(layer.kernels) + [layer.biases]
        params += [self.head.weights, self.head.biases]
        return params

    def parameter_masks(self) -> list[np.ndarray]:
        """Boolean masks congruent with :meth:`parameters`; False marks placeholders."""
        masks = []
        for stack in self.stacks:
            masks += [stack[0].weight_mask(), np.ones(stack[0].biases.shape, bool)]
            for layer in stack[1:]:
                masks += [np.ones(k.shape, bool) for k in layer.kernels]
                masks.append(np.ones(layer.biases.shape, bool))
        masks += [np.ones(self.head.weights.shape, bool), np.ones(self.head.biases.shape, bool)]
        return masks

    def set_parameters(self, values):
        for dst, src in zip(self.parameters(), values, strict=True):
            dst[...] = src

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        """Copy with every parameter cast (e.g. float32 for inference only)."""
        net = self.copy()
        for stack in net.stacks:
            stack[0].weights = stack[0].weights.astype(dtype)
            stack[0].biases = stack[0].biases.astype(dtype)
            for layer in stack[1:]:
                layer.kernels = [k.astype(dtype) for k in layer.kernels]
                layer.biases = layer.biases.astype(dtype)
        net.head.weights = net.head.weights.astype(dtype)
        net.head.biases = net.head.biases.astype(dtype)
        return net


def build(config: NetworkConfig, seed: int = 0) -> Network:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    config.validate()
    rng = np.random.default_rng(seed)

    def uniform(fan_in, size):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=size)

    acts = config.layer_activations()
    stacks = []
    for _ in range(config.num_tisc_channels):
        s = config.input_scales
        weights = np.zeros(2 ** (s.lambda_max + 1) - 1)
        biases = np.zeros(len(s))
        for lam in s:
            weights[core.weight_slice(s, lam)] = uniform(1 << lam, 1 << lam)
            biases[lam - s.lambda_min] = uniform(1 << lam, None)
        stack = [TiScInputLayer(s, weights, biases, acts[0])]
        prev = s
        for k, hs in enumerate(config.hidden_stack):
            kernels, hb = [], np.zeros(len(hs))
            for lam in hs:
                K = kernel_length(prev, lam)
                kernels.append(uniform(K, K))
                hb[lam - hs.lambda_min] = uniform(K, None)
            stack.append(TiScHiddenLayer(prev, hs, kernels, hb, acts[k + 1]))
            prev = hs
        stacks.append(stack)
    n_in = config.head_inputs
    head = DenseHead(
        uniform(n_in, (n_in, config.num_classes)), uniform(n_in, config.num_classes)
    )
    return Network(config, stacks, head, seed)


# -- forward -----------------------------------------------------------------


@dataclass
class LayerTrace:
    inputs: object  # raw interleaved ndarray or EmbeddingTree
    pre: np.ndarray
    outputs: EmbeddingTree  # post-activation, post-dropout
    dropout_mask: np.ndarray | None = None


@dataclass
class ForwardTrace:
    """Everything the backward pass needs from one forward call."""

    x: np.ndarray  # interleaved input, (B, L')
    layers: list  # per stack: list[LayerTrace]
    features: np.ndarray  # (B, head_inputs)
    logits: np.ndarray  # (B, classes)


def prepare_input(net: Network, segments) -> tuple[np.ndarray, bool]:
    """Validate ``(C, T)`` or ``(B, C, T)`` segments and interleave them."""
    x = np.asarray(segments)
    cfg = net.config
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.num_data_channels, cfg.segment_length):
        raise DataError(
            f"segment shape {np.asarray(segments).shape} does not match "
            f"(C, T)=({cfg.num_data_channels}, {cfg.segment_length})"
        )
    if not np.issubdtype(x.dtype, np.floating) or x.dtype == np.float16:
        x = x.astype(np.float64)
    return core.interleave(x), single


def forward_trace(net: Network, xi: np.ndarray, mode: str = "eval", rng=None) -> ForwardTrace:
    """Forward an interleaved batch ``(B, L')`` keeping every intermediate."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    p = net.config.dropout_rate
    drop = mode == "train" and p > 0
    if drop and rng is None:
        rng = np.random.default_rng(net.seed)
    L = xi.shape[-1]
    traces, feats = [], []
    for stack in net.stacks:
        layer_traces = []
        inp = xi
        for layer in stack:
            if isinstance(layer, TiScInputLayer):
                pre = core.preactivate_input(layer, inp)
                scales = layer.scales
            else:
                pre = core.preactivate_hidden(layer, inp)
                scales = layer.out_scales
            out = core._activate(layer.activation, pre, L, scales)
            mask = None
            if drop:
                mask = (rng.random(out.shape) >= p) / (1.0 - p)
                out = out * mask
            tree = EmbeddingTree(out, L, scales)
            layer_traces.append(LayerTrace(inp, pre, tree, mask))
            inp = tree
        traces.append(layer_traces)
        last = layer_traces[-1].outputs
        feats.append(last.values[..., (L >> last.scales.lambda_max) - 1:])
    features = np.concatenate(feats, axis=-1)
    return ForwardTrace(xi, traces, features, net.head(features))


def forward(net: Network, segments, mode: str = "eval", rng=None) -> np.ndarray:
    """Unnormalized class scores for one ``(C, T)`` segment or a batch."""
    xi, single = prepare_input(net, segments)
    logits = forward_trace(net, xi, mode, rng).logits
    return logits[0] if single else logits


# -- cost accounting ---------------------------------------------------------


@dataclass
class CostReport:
    active_params: int
    stored_params: int
    macs_total: int
    macs_per_layer: dict
    activation_count: int
    head_inputs: int

    def to_dict(self) -> dict:
        return asdict(self)


def count_costs(config: NetworkConfig) -> CostReport:
    """Closed-form parameter and multiply counts (bias additions excluded)."""
    Lp = config.interleaved_length
    T = config.num_tisc_channels
    s = config.input_scales
    active = sum((1 << lam) + 1 for lam in s)
    stored = (2 ** (s.lambda_max + 1) - 1) + len(s)
    macs = {"input": T * Lp * len(s)}
    acts = sum(Lp >> lam for lam in s)
    prev = s
    for k, hs in enumerate(config.hidden_stack):
        p = sum(kernel_length(prev, lam) + 1 for lam in hs)
        active += p
        stored += p
        macs[f"hidden{k + 1}"] = T * sum((Lp >> lam) * kernel_length(prev, lam) for lam in hs)
        acts += sum(Lp >> lam for lam in hs)
        prev = hs
    n_in = config.head_inputs
    head = n_in * config.num_classes + config.num_classes
    macs["head"] = n_in * config.num_classes
    return CostReport(
        active_params=T * active + head,
        stored_params=T * stored + head,
        macs_total=sum(macs.values()),
        macs_per_layer=macs,
        activation_count=T * acts,
        head_inputs=n_in,
    )


# -- serialization -----------------------------------------------------------


def _header_json(net: Network) -> bytes:
    doc = {
        "config": net.config.to_dict(),
        "seed": net.seed,
        "support_order": SUPPORT_ORDER,
        "support_order_version": SUPPORT_ORDER_VERSION,
        "parameter_shapes": [list(p.shape) for p in net.parameters()],
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def dumps(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<H", MODEL_FORMAT_VERSION))
    meta = _header_json(net)
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for p in net.parameters():
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save(net: Network, path):
    with open(path, "wb") as fh:
        fh.write(dumps(net))


def loads(blob: bytes) -> Network:
    if len(blob) < 14:
        raise TruncatedFileError("model file shorter than its fixed header")
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MODEL_MAGIC!r}")
    (meta_len,) = struct.unpack_from("<I", blob, 6)
    if len(blob) < 10 + meta_len + 4:
        raise TruncatedFileError("model file truncated inside the config block")
    try:
        doc = json.loads(blob[10:10 + meta_len].decode("utf-8"))
        n_values = sum(int(np.prod(s)) for s in doc["parameter_shapes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError):
        doc, n_values = None, None
    if n_values is not None and len(blob) < 10 + meta_len + 8 * n_values + 4:
        raise TruncatedFileError(
            f"model file has {len(blob)} bytes, header implies {10 + meta_len + 8 * n_values + 4}"
        )
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("model file CRC32 mismatch")
    if doc is None:
        raise FormatError("unreadable model config block")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != MODEL_FORMAT_VERSION:
        raise VersionError(f"model format version {version}, expected {MODEL_FORMAT_VERSION}")
    if doc.get("support_order_version") != SUPPORT_ORDER_VERSION:
        raise VersionError(
            f"model uses support order version {doc.get('support_order_version')}, "
            f"this build reads version {SUPPORT_ORDER_VERSION}"
        )
    net = build(NetworkConfig.from_dict(doc["config"]), seed=0)
    net.seed = doc.get("seed")
    params = net.parameters()
    if [list(p.shape) for p in params] != doc["parameter_shapes"]:
        raise FormatError("parameter shapes recorded in the file do not match the config")
    payload = body[10 + meta_len:]
    if len(payload) != 8 * n_values:
        raise FormatError(f"parameter payload has {len(payload)} bytes, expected {8 * n_values}")
    flat = np.frombuffer(payload, dtype="<f8")
    pos = 0
    for p in params:
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return net


def load(path) -> Network:
    with open(path, "rb") as fh:
        return loads(fh.read())
