import struct

import numpy as np
import pytest

from dbcd.data import (BadMagic, CountMismatch, HourOutOfRange, TruncatedFile, available_at_hour,
                       distribute_evenly, export_csv, gen_blobs, load_idx, read_profiles_csv, split_counts,
                       subsample, write_idx, write_profiles_csv)
from dbcd.model import LocalDataset


def _write_raw(path, magic, dims, payload):
    path.write_bytes(struct.pack(">" + "I" * (1 + len(dims)), magic, *dims) + bytes(payload))


def test_load_idx_hand_bytes(tmp_path):
    _write_raw(tmp_path / "img", 0x803, (1, 2, 2), [0, 128, 255, 64])
    _write_raw(tmp_path / "lab", 0x801, (1,), [7])
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    np.testing.assert_allclose(ds.x[:, 0], [0, 128 / 255, 1, 64 / 255])
    assert ds.x[1, 0] == pytest.approx(0.50196, abs=1e-5) and ds.x[3, 0] == pytest.approx(0.25098, abs=1e-5)
    assert list(ds.y) == [7]


def test_load_idx_count_mismatch(tmp_path):
    _write_raw(tmp_path / "img", 0x803, (1, 2, 2), [0, 1, 2, 3])
    _write_raw(tmp_path / "lab", 0x801, (2,), [1, 2])
    with pytest.raises(CountMismatch):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_load_idx_bad_magic(tmp_path):
    _write_raw(tmp_path / "img", 0x801, (1, 2, 2), [0, 1, 2, 3])
    _write_raw(tmp_path / "lab", 0x801, (1,), [1])
    with pytest.raises(BadMagic):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_load_idx_truncated(tmp_path):
    _write_raw(tmp_path / "img", 0x803, (2, 2, 2), [0, 1, 2, 3])
    _write_raw(tmp_path / "lab", 0x801, (2,), [1, 2])
    with pytest.raises(TruncatedFile):
        load_idx(tmp_path / "img", tmp_path / "lab")
    (tmp_path / "short").write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFile):
        load_idx(tmp_path / "short", tmp_path / "lab")


def test_idx_roundtrip(tmp_path, rng):
    imgs = rng.integers(0, 256, (5, 3, 4)).astype(np.uint8)
    labs = rng.integers(0, 10, 5)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labs)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_allclose(ds.x * 255, imgs.reshape(5, 12).T, atol=1e-9)
    np.testing.assert_array_equal(ds.y, labs)


def test_split_counts():
    assert split_counts(1400) == (840, 280, 280)
    assert split_counts(200) == (120, 40, 40)
    assert split_counts(7) == (5, 1, 1)


def test_distribute_evenly_shards():
    samples = LocalDataset(np.zeros((1, 70000)), np.arange(70000) % 10)
    fed = distribute_evenly(samples, 50)
    assert len(fed) == 50
    for dev in fed.devices:
        assert (dev.train.n_samples, dev.val.n_samples, dev.test.n_samples) == (840, 280, 280)
    np.testing.assert_array_equal(fed.profiles, 1.0)
    assert fed.n_classes == 10


def test_distribute_drops_remainder_and_needs_enough():
    fed = distribute_evenly(LocalDataset(np.zeros((1, 13)), np.zeros(13, dtype=int)), 4)
    assert sum(d.train.n_samples + d.val.n_samples + d.test.n_samples for d in fed.devices) == 12
    with pytest.raises(ValueError):
        distribute_evenly(LocalDataset(np.zeros((1, 3)), np.zeros(3, dtype=int)), 4)


def test_subsample_counts(rng):
    train = LocalDataset(rng.standard_normal((2, 1000)), rng.integers(0, 3, 1000))
    assert subsample(train, 100) is train
    assert subsample(train, 0.1).n_samples == 1
    assert subsample(train, 1).n_samples == 10
    assert subsample(LocalDataset(np.zeros((2, 120)), np.zeros(120, dtype=int)), 1).n_samples == 2
    with pytest.raises(ValueError):
        subsample(train, 0)


def test_subsample_deterministic_subset(rng):
    train = LocalDataset(np.arange(50.0)[None, :], np.zeros(50, dtype=int))
    a, b = subsample(train, 20, seed=4), subsample(train, 20, seed=4)
    np.testing.assert_array_equal(a.x, b.x)
    assert len(set(a.x[0])) == 10 and set(a.x[0]) <= set(train.x[0])


def test_available_at_hour():
    train = LocalDataset(np.arange(200.0)[None, :], np.zeros(200, dtype=int))
    assert available_at_hour(train, 10).n_samples == 200
    assert available_at_hour(train, 1).n_samples == 20
    np.testing.assert_array_equal(available_at_hour(train, 3).x[0], np.arange(60.0))
    odd = LocalDataset(np.zeros((1, 7)), np.zeros(7, dtype=int))
    assert [available_at_hour(odd, t).n_samples for t in range(1, 11)] == [1, 2, 3, 3, 4, 5, 5, 6, 7, 7]
    for bad in (0, 11):
        with pytest.raises(HourOutOfRange):
            available_at_hour(train, bad)


def test_blobs_homogeneous_means_identical():
    fed = gen_blobs(4, 100, heterogeneity=0.0, noise=0.0, seed=2)
    means = []
    for dev in fed.devices:
        pooled = LocalDataset.concat([dev.train, dev.val, dev.test])
        means.append({int(c): pooled.x[:, pooled.y == c][:, 0] for c in np.unique(pooled.y)})
    for m in means[1:]:
        for c, v in m.items():
            np.testing.assert_allclose(v, means[0][c], atol=1e-12)
    np.testing.assert_allclose(fed.profiles[:, 1:], 0.0)


def test_blobs_heterogeneous_means_differ():
    fed = gen_blobs(2, 100, heterogeneity=1.0, noise=0.0, seed=2, n_groups=2)
    a, b = fed.devices[0].train, fed.devices[1].train
    c = int(a.y[0])
    assert np.abs(a.x[:, 0] - b.x[:, b.y == c][:, 0]).max() > 1e-3


def test_blobs_deterministic_and_shapes():
    a = gen_blobs(3, 50, seed=9)
    b = gen_blobs(3, 50, seed=9)
    for da, db in zip(a.devices, b.devices):
        np.testing.assert_array_equal(da.train.x, db.train.x)
        np.testing.assert_array_equal(da.test.y, db.test.y)
    assert a.devices[0].train.x.shape == (10, 30)
    assert a.pooled("val").n_samples == 30
    with pytest.raises(ValueError):
        gen_blobs(2, 10, heterogeneity=1.5)


def test_blob_profiles_track_groups():
    fed = gen_blobs(6, 20, heterogeneity=1.0, n_groups=2, group_spread=0.01, seed=5)
    e = fed.profiles / np.linalg.norm(fed.profiles, axis=1, keepdims=True)
    cos = e @ e.T
    assert cos[0, 2] > cos[0, 1] and cos[1, 3] > cos[1, 2]


def test_profiles_csv_roundtrip(tmp_path, rng):
    prof = rng.standard_normal((4, 3))
    write_profiles_csv(tmp_path / "p.csv", prof)
    np.testing.assert_array_equal(read_profiles_csv(tmp_path / "p.csv"), prof)


def test_export_csv(tmp_path):
    fed = gen_blobs(2, 10, dims=3, seed=1)
    export_csv(fed, tmp_path)
    lines = (tmp_path / "device_1_test.csv").read_text().splitlines()
    assert lines[0] == "label,x0,x1,x2" and len(lines) == 1 + fed.devices[1].test.n_samples
    assert (tmp_path / "profiles.csv").exists()
