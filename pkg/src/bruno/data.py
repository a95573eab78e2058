"""Datasets: IDX ingestion, synthetic exchangeable data and sequence sampling."""

import itertools
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import BadMagic, ConstraintViolation, DimensionMismatch, InsufficientData, TruncatedFile

# IDX type byte -> numpy big-endian dtype
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    """Fixed-dimension items with one class label each."""

    items: np.ndarray
    labels: np.ndarray
    image_shape: tuple = None

    def __post_init__(self):
        self.items = np.asarray(self.items)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.items.ndim != 2:
            raise DimensionMismatch("items must be a 2-d array (count, dim)")
        if self.labels.shape != (self.items.shape[0],):
            raise DimensionMismatch(
                f"{self.items.shape[0]} items but {self.labels.shape[0]} labels"
            )
        if self.labels.size and self.labels.min() < 0:
            raise DimensionMismatch("labels must be non-negative")

    @property
    def dim(self):
        return self.items.shape[1]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @cached_property
    def class_index(self):
        """``{class: array of item indices}`` for every class present."""
        order = np.argsort(self.labels, kind="stable")
        classes, starts = np.unique(self.labels[order], return_index=True)
        bounds = list(starts[1:]) + [order.size]
        return {int(c): order[s:e] for c, s, e in zip(classes, starts, bounds)}

    def subset_classes(self, classes):
        """Items of the given classes, relabelled 0..len(classes)-1."""
        classes = list(classes)
        idx = np.concatenate([self.class_index[c] for c in classes])
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap[int(c)] for c in self.labels[idx]])
        return Dataset(self.items[idx], labels, self.image_shape)


def read_idx(path):
    """Parse one IDX file into an ndarray."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: header is shorter than 4 bytes")
    zero1, zero2, type_code, ndim = raw[0], raw[1], raw[2], raw[3]
    if zero1 != 0 or zero2 != 0 or type_code not in _IDX_DTYPES:
        raise BadMagic(f"{path}: bad magic {raw[:4].hex()}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedFile(f"{path}: dimension table is truncated")
    shape = struct.unpack(f">{ndim}I", raw[4:header_len])
    dtype = _IDX_DTYPES[type_code]
    count = int(np.prod(shape, dtype=np.int64))
    need = header_len + count * dtype.itemsize
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=header_len)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def write_idx(path, array):
    """Write an array as IDX (used for fixtures and exporting samples)."""
    array = np.asarray(array)
    codes = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
    dt = array.dtype.newbyteorder("=")
    if dt not in codes:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    header = bytes([0, 0, codes[dt], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(dt.newbyteorder(">")).tobytes())


def load_idx(images_path, labels_path):
    """Load a paired image/label IDX set as a :class:`Dataset`."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DimensionMismatch("label file must be one-dimensional")
    if images.shape[0] != labels.shape[0]:
        raise DimensionMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    image_shape = images.shape[1:]
    items = images.reshape(images.shape[0], -1)
    return Dataset(items, labels.astype(np.int64), tuple(image_shape))


def rotate_augment(dataset):
    """Add 90/180/270 degree rotations of square images as new classes."""
    if dataset.image_shape is None or len(dataset.image_shape) != 2 or dataset.image_shape[0] != dataset.image_shape[1]:
        raise DimensionMismatch("rotation needs square 2-d images")
    images = dataset.items.reshape((-1,) + tuple(dataset.image_shape))
    n_classes = dataset.num_classes
    items, labels = [], []
    for k in range(4):
        items.append(np.rot90(images, k, axes=(1, 2)).reshape(images.shape[0], -1))
        labels.append(dataset.labels + k * n_classes)
    return Dataset(np.concatenate(items), np.concatenate(labels), dataset.image_shape)


def class_grid(classes, dims, spacing):
    """Deterministic class means: integer lattice points nearest the origin, scaled."""
    if spacing == 0:
        return np.zeros((classes, dims))
    radius = 0
    while (2 * radius + 1) ** dims < classes:
        radius += 1
    points = sorted(
        itertools.product(range(-radius, radius + 1), repeat=dims),
        key=lambda p: (sum(c * c for c in p), p),
    )
    return spacing * np.array(points[:classes], dtype=float)


def synth_exchangeable(rho, dims, classes, per_class, seed, spacing=0.0):
    """Exchangeable Gaussian classes.

    For each class a latent ``theta ~ N(m_c, rho)`` is drawn per dimension and
    the items are i.i.d. ``N(theta, 1 - rho)``, so within a class every item has
    unit variance and any two items have covariance ``rho``. Class means
    ``m_c`` come from :func:`class_grid`; ``spacing=0`` puts them all at the
    origin.
    """
    if not 0.0 <= rho < 1.0:
        raise ConstraintViolation(f"rho must lie in [0, 1), got {rho}")
    rng = np.random.default_rng(seed)
    means = class_grid(classes, dims, spacing)
    theta = means + np.sqrt(rho) * rng.standard_normal((classes, dims))
    noise = np.sqrt(1.0 - rho) * rng.standard_normal((classes, per_class, dims))
    items = (theta[:, None, :] + noise).reshape(classes * per_class, dims)
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(items, labels)


def check_class_sizes(dataset, needed, classes=None):
    index = dataset.class_index
    for c in index if classes is None else classes:
        if index[c].size < needed:
            raise InsufficientData(f"class {c} has {index[c].size} items, {needed} needed")


def sample_sequence(dataset, seq_len, rng, cls=None):
    """Indices of ``seq_len`` distinct items from one class (uniform if ``cls`` is None)."""
    classes = list(dataset.class_index)
    if cls is None:
        cls = classes[rng.integers(len(classes))]
    pool = dataset.class_index[cls]
    if pool.size < seq_len:
        raise InsufficientData(f"class {cls} has {pool.size} items, {seq_len} needed")
    return pool[rng.choice(pool.size, size=seq_len, replace=False)]


def episode_stream(dataset, seq_len, batch, seed):
    """Endless iterator of ``(batch, seq_len)`` index arrays, one class per sequence."""
    check_class_sizes(dataset, seq_len)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    while True:
        yield np.stack([sample_sequence(dataset, seq_len, rng) for _ in range(batch)])
