"""Labeled multi-channel segments, the TSEG binary format and synthetic data.

TSEG layout (all little-endian)::

    b"TSG1"  u16 version
    u32 n_segments, u32 n_channels, u32 seg_len, u32 n_classes
    f32 sample_rate
    u16 labels[n_segments]
    f32 data[n_segments * n_channels * seg_len]   # segment, channel, time
    u32 crc32(all preceding bytes)
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import is_power_of_two
from .errors import ChecksumError, DataError, FormatError, TruncatedFileError, VersionError

TSEG_MAGIC = b"TSG1"
TSEG_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIf")


def _channel_hint(C: int) -> str:
    return (
        f"{C} channels is not a power of two; append all-zero dummy channels "
        f"to reach {1 << (C - 1).bit_length()}"
    )


@dataclass
class SegmentDataset:
    """Fixed-length segments stored as float32 ``(n_segments, C, seg_len)``.

    ``source_index`` maps each segment back to the dataset it was taken from
    (identity for a freshly built dataset).
    """

    data: np.ndarray
    labels: np.ndarray
    n_classes: int
    sample_rate: float = 1.0
    source_index: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.source_index is None:
            self.source_index = np.arange(len(self.labels))
        self.validate()

    def validate(self):
        if self.data.ndim != 3:
            raise DataError(f"data must be (n_segments, C, seg_len), got shape {self.data.shape}")
        n, C, T = self.data.shape
        if not is_power_of_two(C):
            raise DataError(_channel_hint(C))
        if not is_power_of_two(C * T):
            raise DataError(f"interleaved length C*seg_len={C * T} is not a power of two")
        if self.labels.shape != (n,):
            raise DataError(f"{len(self.labels)} labels for {n} segments")
        if self.n_classes < 1 or self.n_classes > 65535:
            raise DataError(f"n_classes={self.n_classes} out of range")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_segments(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def seg_len(self) -> int:
        return self.data.shape[2]

    def __len__(self):
        return self.n_segments

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, indices) -> "SegmentDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SegmentDataset(
            self.data[idx], self.labels[idx], self.n_classes, self.sample_rate,
            self.source_index[idx],
        )

    def segments(self, indices=None, normalize: bool = True) -> np.ndarray:
        """Float64 segments ready for the network, optionally z-scored.

        Normalization is per segment and per channel; constant channels
        (e.g. zero dummy channels) are left at zero.
        """
        x = self.data if indices is None else self.data[np.asarray(indices, dtype=np.int64)]
        x = x.astype(np.float64)
        if normalize:
            x = x - x.mean(axis=-1, keepdims=True)
            sd = x.std(axis=-1, keepdims=True)
            x = np.divide(x, sd, out=np.zeros_like(x), where=sd != 0)
        return x

    def __eq__(self, other):
        if not isinstance(other, SegmentDataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and np.float32(self.sample_rate) == np.float32(other.sample_rate)
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


# -- TSEG --------------------------------------------------------------------


def tseg_bytes(ds: SegmentDataset) -> bytes:
    ds.validate()
    if ds.n_segments and ds.labels.max() > 65535:
        raise DataError("labels do not fit in u16")
    head = _HEADER.pack(
        TSEG_MAGIC, TSEG_VERSION, ds.n_segments, ds.n_channels, ds.seg_len,
        ds.n_classes, ds.sample_rate,
    )
    body = head + ds.labels.astype("<u2").tobytes() + ds.data.astype("<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def write_tseg(ds: SegmentDataset, path):
    Path(path).write_bytes(tseg_bytes(ds))


def parse_tseg(blob: bytes) -> SegmentDataset:
    if len(blob) < _HEADER.size + 4:
        raise TruncatedFileError("TSEG file shorter than its header")
    magic, version, n, C, T, n_classes, rate = _HEADER.unpack_from(blob)
    if magic != TSEG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TSEG_MAGIC!r}")
    expected = _HEADER.size + 2 * n + 4 * n * C * T + 4
    if len(blob) < expected:
        raise TruncatedFileError(
            f"header declares {n} segments ({expected} bytes) but file has {len(blob)} bytes"
        )
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes after payload")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise ChecksumError("TSEG CRC32 mismatch")
    if version != TSEG_VERSION:
        raise VersionError(f"TSEG version {version}, expected {TSEG_VERSION}")
    off = _HEADER.size
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    data = np.frombuffer(blob, dtype="<f4", count=n * C * T, offset=off).reshape(n, C, T)
    return SegmentDataset(data.astype(np.float32), labels, n_classes, float(rate))


def read_tseg(path) -> SegmentDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    return parse_tseg(path.read_bytes())


# -- CSV import --------------------------------------------------------------


def _read_column(path, dtype, what):
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(dtype(text))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric {what} {text!r}") from None
    return values


def import_csv(channel_paths, seg_len: int, labels_path, n_classes: int | None = None,
               sample_rate: float = 1.0) -> SegmentDataset:
    """Chunk one-sample-per-line channel files into non-overlapping segments."""
    channel_paths = list(channel_paths)
    C = len(channel_paths)
    if not is_power_of_two(C):
        raise DataError(_channel_hint(C))
    streams = [np.array(_read_column(p, float, "sample"), dtype=np.float32) for p in channel_paths]
    lengths = {len(s) for s in streams}
    if len(lengths) != 1:
        raise DataError(f"ragged channels: lengths {sorted(lengths)}")
    (n_samples,) = lengths
    if n_samples % seg_len:
        raise DataError(f"{n_samples} samples is not a multiple of seg_len={seg_len}")
    n = n_samples // seg_len
    labels = np.array(_read_column(labels_path, int, "label"), dtype=np.int64)
    if len(labels) != n:
        raise DataError(f"{len(labels)} labels for {n} segments")
    data = np.stack(streams).reshape(C, n, seg_len).transpose(1, 0, 2)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n else 1
    return SegmentDataset(data, labels, n_classes, sample_rate)


# -- synthetic data ----------------------------------------------------------


@dataclass
class SynthSpec:
    """Two-class burst detection task.

    Class 0 is noise only; class 1 adds one Gabor burst whose support spans
    ``2**burst_scale`` interleaved samples (``2**burst_scale / C`` time steps
    on every channel). ``amplitude`` is the burst peak in units of the noise
    standard deviation.
    """

    n_per_class: int = 1000
    seg_len: int = 1024
    n_channels: int = 1
    noise: str = "white"
    burst_scale: int = 7
    amplitude: float = 3.0
    alignment: str = "grid-aligned"
    cycles: float = 4.0
    sample_rate: float = 256.0
    seed: int = 0

    def validate(self):
        if not is_power_of_two(self.n_channels):
            raise DataError(_channel_hint(self.n_channels))
        L = self.n_channels * self.seg_len
        if not is_power_of_two(L):
            raise DataError(f"interleaved length {L} is not a power of two")
        if not 1 <= self.burst_scale or (1 << self.burst_scale) > L:
            raise DataError(f"burst window 2**{self.burst_scale} does not fit in {L} samples")
        if (1 << self.burst_scale) < self.n_channels:
            raise DataError("burst window shorter than one time step across all channels")
        if self.amplitude < 0:
            raise DataError("amplitude must be non-negative")
        if self.noise not in ("white", "pink"):
            raise DataError(f"unknown noise kind {self.noise!r}")
        if self.alignment not in ("grid-aligned", "random"):
            raise DataError(f"unknown alignment {self.alignment!r}")
        if self.n_per_class < 1:
            raise DataError("n_per_class must be positive")


def pink_noise(rng: np.random.Generator, shape, n_rows: int = 16) -> np.ndarray:
    """Voss-McCartney pink noise along the last axis, scaled to unit variance.

    Row ``k`` holds a random value that is redrawn every ``2**k`` samples; the
    output is the sum of all rows plus a white term.
    """
    *lead, n = shape
    t = np.arange(n)
    out = rng.standard_normal(tuple(lead) + (n,))
    for k in range(n_rows):
        n_draws = ((n + (1 << k) - 2) >> k) + 1
        draws = rng.standard_normal(tuple(lead) + (n_draws,))
        phase = rng.integers(0, 1 << k, size=tuple(lead) + (1,))
        out += np.take_along_axis(draws, (t + phase) >> k, axis=-1)
    return out / np.sqrt(n_rows + 1)


def gabor(length: int, cycles: float) -> np.ndarray:
    """Gaussian-windowed cosine with unit peak spanning ``length`` samples."""
    t = np.arange(length) - (length - 1) / 2
    sigma = length / 6.0
    return np.exp(-0.5 * (t / sigma) ** 2) * np.cos(2 * np.pi * cycles * t / length)


def synthesize(spec: SynthSpec) -> SegmentDataset:
    """Generate the burst task; returns segments ordered class 0 then class 1."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = 2 * spec.n_per_class
    C, T = spec.n_channels, spec.seg_len
    shape = (n, C, T)
    noise = rng.standard_normal(shape) if spec.noise == "white" else pink_noise(rng, shape)
    width = (1 << spec.burst_scale) // C
    burst = spec.amplitude * gabor(width, spec.cycles)
    n_slots = T // width
    for k in range(spec.n_per_class, n):
        if spec.alignment == "grid-aligned":
            start = int(rng.integers(0, n_slots)) * width
        else:
            start = int(rng.integers(0, T - width + 1))
        noise[k, :, start:start + width] += burst
    labels = np.repeat([0, 1], spec.n_per_class)
    return SegmentDataset(noise.astype(np.float32), labels, 2, spec.sample_rate)
