import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tisc import core, data, train
from tisc.data import SegmentDataset, SynthSpec
from tisc.errors import ChecksumError, DataError, FormatError, TruncatedFileError, VersionError


def random_dataset(rng, n=5, C=2, T=8, classes=3):
    return SegmentDataset(rng.normal(size=(n, C, T)).astype(np.float32),
                          rng.integers(0, classes, size=n), classes, 128.0)


# -- container -----------------------------------------------------------------


def test_dataset_invariants():
    with pytest.raises(DataError, match="dummy"):
        SegmentDataset(np.zeros((2, 3, 8)), [0, 1], 2)
    with pytest.raises(DataError):
        SegmentDataset(np.zeros((2, 2, 6)), [0, 1], 2)
    with pytest.raises(DataError):
        SegmentDataset(np.zeros((2, 1, 8)), [0, 2], 2)
    with pytest.raises(DataError):
        SegmentDataset(np.zeros((2, 1, 8)), [0], 2)


def test_segments_normalization(rng):
    ds = random_dataset(rng)
    x = ds.segments()
    assert x.dtype == np.float64
    assert np.allclose(x.mean(axis=-1), 0, atol=1e-12)
    assert np.allclose(x.std(axis=-1), 1)
    zeros = SegmentDataset(np.zeros((1, 2, 8)), [0], 2)
    assert not zeros.segments().any()
    assert np.array_equal(ds.segments(normalize=False), ds.data.astype(np.float64))


# -- TSEG ----------------------------------------------------------------------


def test_tseg_roundtrip(tmp_path, rng):
    ds = random_dataset(rng)
    p = tmp_path / "d.tseg"
    data.write_tseg(ds, p)
    back = data.read_tseg(p)
    assert back == ds
    assert data.tseg_bytes(back) == p.read_bytes()


def test_tseg_layout(rng):
    ds = random_dataset(rng, n=2, C=1, T=4, classes=2)
    blob = data.tseg_bytes(ds)
    assert blob[:4] == b"TSG1"
    assert struct.unpack_from("<HIIIIf", blob, 4) == (1, 2, 1, 4, 2, 128.0)
    labels = np.frombuffer(blob, "<u2", 2, 26)
    assert labels.tolist() == ds.labels.tolist()
    payload = np.frombuffer(blob, "<f4", 8, 30).reshape(2, 1, 4)
    assert np.array_equal(payload, ds.data)
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_tseg_flip_byte_crc(rng):
    blob = bytearray(data.tseg_bytes(random_dataset(rng)))
    blob[40] ^= 0xFF
    with pytest.raises(ChecksumError):
        data.parse_tseg(bytes(blob))


def test_tseg_overstated_count_truncated(rng):
    blob = bytearray(data.tseg_bytes(random_dataset(rng)))
    struct.pack_into("<I", blob, 6, 50)
    with pytest.raises(TruncatedFileError):
        data.parse_tseg(bytes(blob))
    with pytest.raises(TruncatedFileError):
        data.parse_tseg(bytes(blob[:10]))


def test_tseg_bad_magic_and_version(rng):
    blob = data.tseg_bytes(random_dataset(rng))
    with pytest.raises(FormatError):
        data.parse_tseg(b"NOPE" + blob[4:])
    bad = bytearray(blob[:-4])
    struct.pack_into("<H", bad, 4, 2)
    with pytest.raises(VersionError):
        data.parse_tseg(bytes(bad) + struct.pack("<I", zlib.crc32(bytes(bad))))
    with pytest.raises(FormatError):
        data.parse_tseg(blob + b"\0")


def test_read_missing_file(tmp_path):
    with pytest.raises(DataError, match="nope.tseg"):
        data.read_tseg(tmp_path / "nope.tseg")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 8, 32]),
       st.integers(1, 300), st.integers(0, 2 ** 31))
def test_tseg_roundtrip_fuzzed(n, C, T, classes, seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, C, T)).astype(np.float32)
    raw.reshape(-1)[: min(raw.size, 2)] = [np.inf, -0.0][: min(raw.size, 2)]
    ds = SegmentDataset(raw, rng.integers(0, classes, size=n), classes, float(rng.uniform(1, 1e4)))
    back = data.parse_tseg(data.tseg_bytes(ds))
    assert back == ds
    assert back.data.tobytes() == ds.data.tobytes()


# -- CSV import ------------------------------------------------------------------


def _write_column(path, values):
    path.write_text("\n".join(values) + "\n")


def test_import_csv_two_channels(tmp_path, rng):
    streams = rng.normal(size=(2, 4096))
    paths = []
    for c in range(2):
        p = tmp_path / f"ch{c}.csv"
        _write_column(p, [repr(float(v)) for v in streams[c]])
        paths.append(p)
    lab = tmp_path / "labels.csv"
    _write_column(lab, ["0", "1"])
    ds = data.import_csv(paths, 2048, lab)
    assert ds.n_segments == 2 and ds.n_channels == 2 and ds.seg_len == 2048
    assert np.array_equal(ds.data[1, 0], streams[0, 2048:].astype(np.float32))
    assert ds.labels.tolist() == [0, 1]


def test_import_csv_values_exact_f32(tmp_path):
    texts = ["0.1", "-3.4028234e38", "1e-45", "123456789", "2.5", "-0.0", "7", "0.333333343"]
    p = tmp_path / "c.csv"
    _write_column(p, texts)
    lab = tmp_path / "l.csv"
    _write_column(lab, ["1"])
    ds = data.import_csv([p], 8, lab)
    expect = np.array([np.float32(t) for t in texts], dtype=np.float32)
    assert ds.data.reshape(-1).tobytes() == expect.tobytes()


def test_import_csv_errors(tmp_path):
    a, b, c = (tmp_path / f"{k}.csv" for k in "abc")
    _write_column(a, ["1"] * 8)
    _write_column(b, ["1"] * 7)
    _write_column(c, ["1"] * 8)
    lab = tmp_path / "l.csv"
    _write_column(lab, ["0"])
    with pytest.raises(DataError, match="dummy"):
        data.import_csv([a, b, c], 8, lab)
    with pytest.raises(DataError, match="ragged"):
        data.import_csv([a, b], 4, lab)
    _write_column(b, ["1"] * 7 + ["x"])
    with pytest.raises(DataError, match="non-numeric"):
        data.import_csv([a, b], 8, lab)
    _write_column(lab, ["0", "1"])
    with pytest.raises(DataError, match="labels"):
        data.import_csv([a], 8, lab)


# -- synthetic data ------------------------------------------------------------


def test_synth_reproducible():
    spec = SynthSpec(n_per_class=20, seg_len=256, seed=3)
    assert data.tseg_bytes(data.synthesize(spec)) == data.tseg_bytes(data.synthesize(spec))
    other = SynthSpec(n_per_class=20, seg_len=256, seed=4)
    assert data.tseg_bytes(data.synthesize(spec)) != data.tseg_bytes(data.synthesize(other))


def test_synth_validation():
    with pytest.raises(DataError):
        SynthSpec(burst_scale=11).validate()
    with pytest.raises(DataError):
        SynthSpec(n_channels=3).validate()
    with pytest.raises(DataError):
        SynthSpec(amplitude=-1).validate()
    with pytest.raises(DataError):
        SynthSpec(noise="brown").validate()


def test_synth_burst_window_energy_dominates():
    spec = SynthSpec(n_per_class=500, seg_len=1024, burst_scale=7, amplitude=3.0, seed=0)
    ds = data.synthesize(spec)
    x = ds.data[ds.labels == 1, 0].astype(np.float64)
    energy = (x.reshape(len(x), -1, 128) ** 2).sum(axis=-1)
    # the planted window is the clean-vs-noise difference, recovered from the regenerated noise
    ref = data.synthesize(SynthSpec(**{**spec.__dict__, "amplitude": 0.0}))
    planted = np.abs(x - ref.data[ref.labels == 1, 0]).reshape(len(x), -1, 128).sum(axis=-1).argmax(axis=1)
    wins = energy.argmax(axis=1) == planted
    assert wins.mean() >= 0.99


def test_synth_grid_alignment_and_random_mode():
    for alignment, aligned in (("grid-aligned", True), ("random", False)):
        spec = SynthSpec(n_per_class=200, seg_len=1024, amplitude=3.0, alignment=alignment, seed=1)
        ds = data.synthesize(spec)
        ref = data.synthesize(SynthSpec(**{**spec.__dict__, "amplitude": 0.0}))
        diff = (ds.data - ref.data)[ds.labels == 1, 0]
        starts = np.array([np.flatnonzero(np.abs(d) > 0)[0] for d in diff])
        # support of the Gaussian window is clipped only at float32 underflow, so the
        # first touched sample is the burst start
        assert np.all(starts % 128 == 0) == aligned
        assert not (ds.data - ref.data)[ds.labels == 0].any()


def test_synth_multichannel_burst_width():
    spec = SynthSpec(n_per_class=10, seg_len=512, n_channels=2, burst_scale=7, seed=2)
    ds = data.synthesize(spec)
    ref = data.synthesize(SynthSpec(**{**spec.__dict__, "amplitude": 0.0}))
    diff = (ds.data - ref.data)[ds.labels == 1]
    for d in diff:
        touched = np.flatnonzero(np.abs(core.interleave(d)) > 0)
        assert touched.max() - touched.min() < 128
        assert touched.min() % 128 == 0


def test_pink_noise_has_spectral_tilt():
    x = data.pink_noise(np.random.default_rng(0), (64, 4096))
    assert abs(x.std() - 1) < 0.2
    psd = (np.abs(np.fft.rfft(x, axis=-1)) ** 2).mean(axis=0)
    assert psd[1:20].mean() > 5 * psd[-500:].mean()


def test_gabor_unit_peak():
    g = data.gabor(128, 4.0)
    assert g.shape == (128,)
    assert 0.99 < np.abs(g).max() <= 1.0


def test_zero_amplitude_is_chance():
    ds = data.synthesize(SynthSpec(n_per_class=300, seg_len=256, burst_scale=6, amplitude=0.0, seed=9))
    # a nearest-class-mean energy classifier on held-out halves stays at chance
    e = (ds.segments(normalize=False) ** 2).reshape(len(ds), 4, 64).sum(-1).max(-1)
    idx = np.random.default_rng(0).permutation(len(ds))
    tr, te = idx[:300], idx[300:]
    m0, m1 = (e[tr][ds.labels[tr] == k].mean() for k in (0, 1))
    pred = (np.abs(e[te] - m1) < np.abs(e[te] - m0)).astype(int)
    assert abs((pred == ds.labels[te]).mean() - 0.5) < 0.1


def test_balance_and_folds_never_duplicate():
    labels = np.array([0] * 70 + [1] * 30)
    ds = SegmentDataset(np.zeros((100, 1, 8)), labels, 2)
    bal = train.balance(ds, seed=0)
    assert len(set(bal.source_index.tolist())) == len(bal)
    plan = train.make_folds(bal.labels, folds=5, seed=0)
    pieces = [plan.test] + list(plan.folds)
    allidx = np.concatenate(pieces)
    assert len(allidx) == len(set(allidx.tolist())) == len(bal)
