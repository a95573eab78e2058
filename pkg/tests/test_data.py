import struct

import numpy as np
import pytest

from bruno.data import (
    Dataset,
    class_grid,
    episode_stream,
    load_idx,
    read_idx,
    rotate_augment,
    synth_exchangeable,
    write_idx,
)
from bruno.errors import BadMagic, ConstraintViolation, DimensionMismatch, InsufficientData, TruncatedFile


@pytest.fixture
def idx_pair(tmp_path):
    """Two 2x2 images and their labels, written byte by byte."""
    images = bytes([0x00, 0x00, 0x08, 0x03]) + struct.pack(">III", 2, 2, 2) + bytes([0, 1, 2, 3, 255, 128, 64, 32])
    labels = bytes([0x00, 0x00, 0x08, 0x01]) + struct.pack(">I", 2) + bytes([7, 3])
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(images)
    lp.write_bytes(labels)
    return ip, lp


def test_load_idx_fixture(idx_pair):
    ds = load_idx(*idx_pair)
    assert ds.items.shape == (2, 4)
    assert ds.items.dtype == np.uint8
    np.testing.assert_array_equal(ds.items, [[0, 1, 2, 3], [255, 128, 64, 32]])
    np.testing.assert_array_equal(ds.labels, [7, 3])
    assert ds.image_shape == (2, 2)


def test_truncated_payload(tmp_path, idx_pair):
    ip, lp = idx_pair
    bad = tmp_path / "short.idx"
    bad.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(TruncatedFile):
        load_idx(bad, lp)
    bad.write_bytes(ip.read_bytes()[:6])
    with pytest.raises(TruncatedFile):
        read_idx(bad)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(bytes([0x01, 0x00, 0x08, 0x01]) + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(BadMagic):
        read_idx(p)
    p.write_bytes(bytes([0x00, 0x00, 0x07, 0x01]) + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(BadMagic):
        read_idx(p)


def test_count_mismatch(tmp_path, idx_pair):
    ip, _ = idx_pair
    lp = tmp_path / "lab3.idx"
    lp.write_bytes(bytes([0, 0, 8, 1]) + struct.pack(">I", 3) + bytes([1, 2, 3]))
    with pytest.raises(DimensionMismatch):
        load_idx(ip, lp)


def test_idx_write_read_roundtrip(tmp_path):
    arr = np.arange(24, dtype=np.int32).reshape(2, 3, 4) - 7
    write_idx(tmp_path / "a.idx", arr)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), arr)


def test_rotation_augment():
    items = np.arange(8, dtype=np.uint8).reshape(2, 4)
    ds = rotate_augment(Dataset(items, [0, 1], (2, 2)))
    assert ds.items.shape == (8, 4)
    assert ds.num_classes == 8
    np.testing.assert_array_equal(ds.items[2].reshape(2, 2), np.rot90(items[0].reshape(2, 2)))
    with pytest.raises(DimensionMismatch):
        rotate_augment(Dataset(items, [0, 1]))


def test_synth_rho_zero_uncorrelated_items():
    ds = synth_exchangeable(0.0, 2, 2000, 2, seed=0)
    pairs = ds.items.reshape(2000, 2, 2)
    cov = np.mean(pairs[:, 0] * pairs[:, 1], axis=0)
    assert np.all(np.abs(cov) < 4 / np.sqrt(2000))


def test_synth_rho_half_covariance():
    ds = synth_exchangeable(0.5, 3, 4000, 3, seed=1)
    pairs = ds.items.reshape(4000, 3, 3)
    cov = np.mean(pairs[:, 0] * pairs[:, 1], axis=0)
    var = np.mean(pairs[:, 0] ** 2, axis=0)
    # standard error of a product of unit-variance, 0.5-correlated normals is sqrt(1.25 / N)
    se = np.sqrt(1.25 / 4000)
    assert np.all(np.abs(cov - 0.5) < 4 * se)
    assert np.all(np.abs(var - 1.0) < 4 * np.sqrt(2 / 4000))


def test_synth_deterministic_and_validated():
    a = synth_exchangeable(0.3, 4, 5, 6, seed=9, spacing=2.0)
    b = synth_exchangeable(0.3, 4, 5, 6, seed=9, spacing=2.0)
    np.testing.assert_array_equal(a.items, b.items)
    with pytest.raises(ConstraintViolation):
        synth_exchangeable(1.0, 2, 2, 2, seed=0)
    with pytest.raises(ConstraintViolation):
        synth_exchangeable(-0.1, 2, 2, 2, seed=0)


def test_class_grid_distinct_means():
    means = class_grid(30, 3, 2.5)
    assert len({tuple(m) for m in means}) == 30
    assert np.all(means[0] == 0)
    assert np.all(class_grid(4, 2, 0.0) == 0)


def test_episode_stream_whole_class():
    ds = synth_exchangeable(0.0, 2, 3, 20, seed=0)
    batch = next(episode_stream(ds, 20, 4, seed=1))
    assert batch.shape == (4, 20)
    for row in batch:
        assert len(set(ds.labels[row])) == 1
        assert sorted(row) == sorted(ds.class_index[int(ds.labels[row[0]])])


def test_episode_stream_reproducible():
    ds = synth_exchangeable(0.0, 2, 5, 10, seed=0)
    s1, s2 = episode_stream(ds, 5, 3, seed=4), episode_stream(ds, 5, 3, seed=4)
    for _ in range(3):
        np.testing.assert_array_equal(next(s1), next(s2))


def test_episode_stream_insufficient():
    ds = synth_exchangeable(0.0, 2, 3, 4, seed=0)
    with pytest.raises(InsufficientData):
        next(episode_stream(ds, 5, 2, seed=0))


def test_dataset_validation():
    with pytest.raises(DimensionMismatch):
        Dataset(np.zeros((3, 2)), [0, 1])
    ds = Dataset(np.zeros((4, 2)), [1, 0, 1, 2])
    assert ds.num_classes == 3
    np.testing.assert_array_equal(ds.class_index[1], [0, 2])
    sub = ds.subset_classes([2, 1])
    np.testing.assert_array_equal(sub.labels, [0, 1, 1])
