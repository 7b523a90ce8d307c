"""Federated datasets: synthetic blobs, IDX loading, partitioning, sparsity and arrival schedules."""

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from dbcd.model import LocalDataset
from dbcd.numerics import seeded_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
ARRIVAL_HOURS = 10


class IdxFormatError(ValueError):
    pass


class BadMagic(IdxFormatError):
    pass


class CountMismatch(IdxFormatError):
    pass


class TruncatedFile(IdxFormatError):
    pass


class HourOutOfRange(ValueError):
    pass


@dataclass
class DeviceData:
    train: LocalDataset
    val: LocalDataset
    test: LocalDataset
    profile: np.ndarray


@dataclass
class FederatedDataset:
    devices: list
    input_dim: int
    n_classes: int

    def __len__(self):
        return len(self.devices)

    @property
    def profiles(self):
        return np.stack([d.profile for d in self.devices])

    def pooled(self, split="train"):
        return LocalDataset.concat([getattr(d, split) for d in self.devices])

    def map_train(self, fn):
        """New dataset with ``fn(device_index, train_split)`` as each training split."""
        return FederatedDataset(
            [DeviceData(fn(a, d.train), d.val, d.test, d.profile) for a, d in enumerate(self.devices)],
            self.input_dim,
            self.n_classes,
        )


def split_counts(n):
    """(train, val, test) sizes; val and test are floored and train takes the remainder."""
    n_val = int(math.floor(n * SPLIT_FRACTIONS[1]))
    n_test = int(math.floor(n * SPLIT_FRACTIONS[2]))
    return n - n_val - n_test, n_val, n_test


def split_device(samples, profile, rng):
    perm = rng.permutation(samples.n_samples)
    n_train, n_val, _ = split_counts(samples.n_samples)
    return DeviceData(
        samples.take(perm[:n_train]),
        samples.take(perm[n_train:n_train + n_val]),
        samples.take(perm[n_train + n_val:]),
        np.asarray(profile, dtype=np.float64),
    )


def gen_blobs(devices, per_device, dims=10, classes=4, heterogeneity=0.5, seed=0,
              separation=3.0, noise=1.0, n_groups=3, group_spread=0.1, latent_dim=3):
    """Gaussian class blobs whose means drift per device.

    Each device belongs to one of ``n_groups`` user groups and carries a latent
    descriptor ``z`` (group centre plus ``group_spread`` jitter). Its class means
    are the shared means rotated by ``expm(heterogeneity * sum_k z_k G_k)`` and
    shifted by ``heterogeneity * z @ P``. Profiles are ``[1, heterogeneity * z]``,
    so cosine similarity of profiles follows similarity of distributions and is
    identically 1 when ``heterogeneity == 0``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= heterogeneity <= 1.0:
        raise ValueError("heterogeneity must lie in [0, 1]")
    rng = seeded_rng(seed)
    base = rng.standard_normal((classes, dims))
    base *= separation / np.linalg.norm(base, axis=1, keepdims=True)
    generators = rng.standard_normal((latent_dim, dims, dims))
    generators = (generators - generators.transpose(0, 2, 1)) / np.sqrt(2 * dims)
    shift_proj = rng.standard_normal((latent_dim, dims)) * separation / np.sqrt(latent_dim)
    group_centres = rng.standard_normal((n_groups, latent_dim))

    out = []
    for a in range(devices):
        z = group_centres[a % n_groups] + group_spread * rng.standard_normal(latent_dim)
        rot = expm(heterogeneity * np.tensordot(z, generators, axes=1))
        means = base @ rot.T + heterogeneity * (z @ shift_proj)
        y = rng.integers(0, classes, size=per_device)
        x = means[y] + noise * rng.standard_normal((per_device, dims))
        profile = np.concatenate(([1.0], heterogeneity * z))
        out.append(split_device(LocalDataset(x.T, y), profile, rng))
    return FederatedDataset(out, dims, classes)


def _read_header(buf, n_dims, path):
    need = 4 + 4 * n_dims
    if len(buf) < need:
        raise TruncatedFile(f"{path}: header needs {need} bytes, file has {len(buf)}")
    return struct.unpack(">" + "I" * (1 + n_dims), buf[:need])


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair as a ``LocalDataset`` with pixels scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    magic, count, rows, cols = _read_header(img, 3, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagic(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    l_magic, l_count = _read_header(lab, 1, labels_path)
    if l_magic != IDX_LABEL_MAGIC:
        raise BadMagic(f"{labels_path}: magic 0x{l_magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    if l_count != count:
        raise CountMismatch(f"{count} images but {l_count} labels")
    n_pix = count * rows * cols
    if len(img) < 16 + n_pix:
        raise TruncatedFile(f"{images_path}: expected {n_pix} pixel bytes, found {len(img) - 16}")
    if len(lab) < 8 + count:
        raise TruncatedFile(f"{labels_path}: expected {count} label bytes, found {len(lab) - 8}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n_pix, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=count, offset=8)
    x = pixels.reshape(count, rows * cols).T.astype(np.float64) / 255.0
    return LocalDataset(x, labels.astype(np.int64))


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 ``images`` (count x rows x cols) and ``labels`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]) + labels.tobytes())


def distribute_evenly(samples, devices, seed=0, n_classes=None):
    """Random equal shards (remainder dropped), each split 60/20/20, all-ones profiles."""
    if samples.n_samples < devices:
        raise ValueError(f"{samples.n_samples} samples cannot fill {devices} devices")
    rng = seeded_rng(seed)
    perm = rng.permutation(samples.n_samples)
    shard = samples.n_samples // devices
    out = [
        split_device(samples.take(perm[a * shard:(a + 1) * shard]), np.ones(1), rng)
        for a in range(devices)
    ]
    if n_classes is None:
        n_classes = int(samples.y.max()) + 1
    return FederatedDataset(out, samples.x.shape[0], n_classes)


def subsample(train, r_percent, seed=0):
    """Keep ``ceil(N * r / 100)`` (at least one) samples, drawn without replacement."""
    if not 0.0 < r_percent <= 100.0:
        raise ValueError(f"r_percent must lie in (0, 100], got {r_percent}")
    n = train.n_samples
    keep = max(1, math.ceil(n * r_percent / 100.0 - 1e-9))
    if keep >= n:
        return train
    idx = np.sort(seeded_rng(seed).choice(n, size=keep, replace=False))
    return train.take(idx)


def available_count(n, hour):
    return min(n, -(-n * hour // ARRIVAL_HOURS))


def available_at_hour(train, hour):
    """Prefix of the training split visible at ``hour`` (1..10): ``ceil(N * hour / 10)`` samples."""
    if not 1 <= hour <= ARRIVAL_HOURS:
        raise HourOutOfRange(f"hour must lie in 1..{ARRIVAL_HOURS}, got {hour}")
    return train.take(np.arange(available_count(train.n_samples, hour)))


def export_csv(fed, out_dir):
    """One ``device_<a>_<split>.csv`` per device and split with rows ``label, features...``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for a, dev in enumerate(fed.devices):
        for split in ("train", "val", "test"):
            ds = getattr(dev, split)
            with open(out_dir / f"device_{a}_{split}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["label"] + [f"x{j}" for j in range(ds.x.shape[0])])
                for j in range(ds.n_samples):
                    writer.writerow([int(ds.y[j])] + [repr(float(v)) for v in ds.x[:, j]])
    write_profiles_csv(out_dir / "profiles.csv", fed.profiles)


def write_profiles_csv(path, profiles):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["device_id"] + [f"e_{k + 1}" for k in range(profiles.shape[1])])
        for a, row in enumerate(profiles):
            writer.writerow([a] + [repr(float(v)) for v in row])


def read_profiles_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = [r for r in rows[1:] if r]
    body.sort(key=lambda r: int(r[0]))
    return np.array([[float(v) for v in r[1:]] for r in body])
