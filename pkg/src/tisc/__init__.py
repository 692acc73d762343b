"""Time-scale networks: learned kernels on a dyadic lattice of non-overlapping windows."""
from .core import (
    ActivationKind,
    EmbeddingTree,
    ScaleRange,
    TiScHiddenLayer,
    TiScInputLayer,
    forward_hidden,
    forward_input,
    interleave,
)
from .data import SegmentDataset, SynthSpec, read_tseg, synthesize, write_tseg
from .errors import ConfigError, DataError, DivergenceError, TiScError
from .model import Network, NetworkConfig, build, count_costs, forward, load, save
from .train import TrainConfig, fit

__version__ = "0.1.0"
