import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kfgn.data import (
    Dataset,
    MinibatchSampler,
    gen_curves,
    gen_digits,
    load_idx,
    minibatches,
    odd_even_labels,
    read_idx,
    save_idx_images,
    save_idx_labels,
)
from kfgn.errors import ContractError, ParseError


def test_curves_deterministic():
    a, b = gen_curves(20, 12, seed=4), gen_curves(20, 12, seed=4)
    assert np.array_equal(a.inputs, b.inputs)
    assert not np.array_equal(a.inputs, gen_curves(20, 12, seed=5).inputs)


def test_curves_range_and_autoencoder_targets():
    ds = gen_curves(50, 12, seed=0)
    assert ds.inputs.shape == (144, 50)
    assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1
    assert np.array_equal(ds.targets, ds.inputs)


def test_curves_nonzero_fraction_side28():
    ds = gen_curves(1000, 28, seed=0)
    frac = np.mean(ds.inputs > 0)
    assert 0.02 <= frac <= 0.5


def test_curves_rejects_small_side():
    with pytest.raises(ContractError):
        gen_curves(3, 7)
    with pytest.raises(ContractError):
        gen_curves(0, 12)


def test_curves_quantised():
    X = gen_curves(10, 10, seed=1).inputs
    np.testing.assert_array_equal(np.round(X * 255) / 255, X)


def test_digits_labels_balanced_and_consistent():
    ds = gen_digits(500, 12, seed=0)
    assert ds.targets.shape == (1, 500)
    np.testing.assert_array_equal(ds.targets[0], ds.digits % 2)
    assert 0.35 < ds.targets.mean() < 0.65


def test_odd_even_examples():
    assert odd_even_labels(7) == 1
    assert odd_even_labels(0) == 0
    np.testing.assert_array_equal(odd_even_labels([1, 2, 3]), [1, 0, 1])


def test_dataset_validation():
    with pytest.raises(ContractError):
        Dataset(np.full((2, 2), 1.5), np.zeros((2, 2)))
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 3)), np.zeros((1, 2)))


# -------------------------------------------------------------------- IDX


def test_idx_fixture(tmp_path):
    p = tmp_path / "fix.idx"
    p.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(range(8)))
    X = load_idx(p)
    assert X.shape == (4, 2)
    np.testing.assert_allclose(X[:, 0], np.arange(4) / 255)
    np.testing.assert_allclose(X[:, 1], np.arange(4, 8) / 255)


def test_idx_labels(tmp_path):
    p = tmp_path / "lab.idx"
    p.write_bytes(struct.pack(">II", 0x801, 3) + bytes([7, 0, 9]))
    np.testing.assert_array_equal(load_idx(p, scale=False), [[7, 0, 9]])


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(struct.pack(">I", 0xDEADBEEF) + bytes(8))
    with pytest.raises(ParseError, match="offset 0"):
        load_idx(p)


def test_idx_empty(tmp_path):
    p = tmp_path / "empty.idx"
    p.write_bytes(b"")
    with pytest.raises(ParseError):
        load_idx(p)


def test_idx_truncated_and_trailing(tmp_path):
    p = tmp_path / "t.idx"
    p.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(5))
    with pytest.raises(ParseError, match="truncated"):
        read_idx(p)
    p.write_bytes(struct.pack(">III", 0x803, 2, 2))
    with pytest.raises(ParseError, match="truncated"):
        read_idx(p)
    p.write_bytes(struct.pack(">II", 0x801, 1) + bytes(2))
    with pytest.raises(ParseError, match="offset 9"):
        read_idx(p)


def test_idx_roundtrip_exact(tmp_path):
    ds = gen_curves(30, 9, seed=2)
    p = tmp_path / "img.idx"
    save_idx_images(p, ds.inputs, 9, 9)
    raw = p.read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 30, 9, 9)
    assert np.array_equal(load_idx(p), ds.inputs)


def test_idx_gzip_roundtrip(tmp_path):
    p = tmp_path / "lab.idx.gz"
    save_idx_labels(p, [3, 1, 4, 1, 5])
    with gzip.open(p, "rb") as fh:
        assert struct.unpack(">I", fh.read(4))[0] == 0x801
    np.testing.assert_array_equal(load_idx(p, scale=False)[0], [3, 1, 4, 1, 5])


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000))
def test_idx_roundtrip_property(rows, cols, count, seed):
    import tempfile, os

    X = np.random.default_rng(seed).integers(0, 256, size=(rows * cols, count)) / 255.0
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "x.idx")
        save_idx_images(p, X, rows, cols)
        assert np.array_equal(load_idx(p), X)


def test_idx_save_rejects_bad_input(tmp_path):
    with pytest.raises(ContractError):
        save_idx_images(tmp_path / "a.idx", np.zeros((5, 2)), 2, 2)
    with pytest.raises(ContractError):
        save_idx_images(tmp_path / "a.idx", np.full((4, 2), 2.0), 2, 2)
    with pytest.raises(ContractError):
        save_idx_labels(tmp_path / "b.idx", [300])


# ---------------------------------------------------------------- sampling


def test_full_batch_is_permutation():
    s = MinibatchSampler(10, 10, np.random.default_rng(0))
    assert sorted(s.next().tolist()) == list(range(10))


def test_sampler_reproducible():
    a = MinibatchSampler(17, 5, np.random.default_rng(3))
    b = MinibatchSampler(17, 5, np.random.default_rng(3))
    for _ in range(10):
        assert np.array_equal(a.next(), b.next())


@given(st.integers(1, 40), st.integers(0, 1000), st.data())
def test_two_epochs_cover_each_sample_twice(m, seed, data):
    n = data.draw(st.sampled_from([d for d in range(1, m + 1) if m % d == 0]))
    s = MinibatchSampler(m, n, np.random.default_rng(seed))
    idx = np.concatenate([s.next() for _ in range(2 * m // n)])
    assert np.all(np.bincount(idx, minlength=m) == 2)


def test_batches_without_replacement_within_batch():
    s = MinibatchSampler(7, 5, np.random.default_rng(0))
    for _ in range(20):
        b = s.next()
        assert len(set(b.tolist())) == 5


def test_sampler_rejects_oversized_batch():
    with pytest.raises(ContractError):
        MinibatchSampler(3, 4, np.random.default_rng(0))


def test_minibatches_yield_pairs():
    ds = gen_digits(20, 10, seed=0)
    X, Y = next(minibatches(ds, 4, np.random.default_rng(0)))
    assert X.shape == (100, 4) and Y.shape == (1, 4)
