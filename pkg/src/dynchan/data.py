"""MNIST IDX / CIFAR-10 binary readers, normalisation, augmentation, batching."""

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import NumericError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

DATA_ENV = "DYNCHAN_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


@dataclass
class Dataset:
    images: np.ndarray          # N x C x H x W, uint8 or float
    labels: np.ndarray          # N, int64
    split: str = "train"
    num_classes: int = 10
    mean: np.ndarray = None     # per-channel stats used for normalisation
    std: np.ndarray = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ParseError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ParseError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        return replace(self, images=self.images[indices], labels=self.labels[indices])


def _read(path):
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _resolve(path):
    """Accept ``foo`` or ``foo.gz``, whichever exists."""
    path = Path(path)
    if path.exists():
        return path
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gz
    raise FileNotFoundError(path)


def parse_idx(raw):
    """Decode an IDX byte string into a uint8 array."""
    if len(raw) < 4:
        raise ParseError("file shorter than the IDX magic", "byte 0")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise ParseError(f"bad IDX magic 0x{magic:08x}", "byte 0")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"truncated IDX header: need {header} bytes, have {len(raw)}", "byte 4")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise ParseError(f"IDX payload length mismatch: expected {expected} bytes, got {len(raw)}",
                         f"byte {min(len(raw), expected)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split="train", num_classes=10):
    """Read an MNIST image/label file pair (plain or gzipped)."""
    images = parse_idx(_read(images_path))
    labels = parse_idx(_read(labels_path))
    if images.ndim != 3:
        raise ParseError(f"{images_path}: expected a 3-D image array, got {images.ndim}-D")
    if labels.ndim != 1:
        raise ParseError(f"{labels_path}: expected a 1-D label array")
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise ParseError(f"{labels_path}: label {labels[bad[0]]} out of range", f"byte {8 + bad[0]}")
    return Dataset(images[:, None, :, :].copy(), labels.astype(np.int64), split, num_classes)


def parse_cifar_binary(raw, num_classes=10):
    if len(raw) % CIFAR_RECORD:
        n = len(raw) // CIFAR_RECORD
        raise ParseError(f"CIFAR-10 file length {len(raw)} is not a multiple of {CIFAR_RECORD}; "
                         f"expected {(n + 1) * CIFAR_RECORD} bytes for {n + 1} records",
                         f"byte {n * CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise ParseError(f"label {labels[bad[0]]} out of range", f"byte {bad[0] * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def load_cifar_binary(paths, split="train"):
    """Read one or more CIFAR-10 binary batch files."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    ims, labs = [], []
    for p in paths:
        try:
            im, lab = parse_cifar_binary(_read(p))
        except ParseError as exc:
            raise ParseError(f"{p}: {exc}") from None
        ims.append(im)
        labs.append(lab)
    return Dataset(np.concatenate(ims), np.concatenate(labs), split, 10)


def data_root(data_dir=None):
    return Path(data_dir or os.environ.get(DATA_ENV) or "data")


def load_dataset(name, split, data_dir=None):
    """Load ``mnist`` or ``cifar10`` from conventional filenames under the data root.

    MNIST is looked up in ``<root>/mnist``; CIFAR-10 in
    ``<root>/cifar-10-batches-bin``. ``mnist5k`` names the bundled
    5000-image MNIST subset in ``<root>/mnist5k``.
    """
    root = data_root(data_dir)
    if name in ("mnist", "mnist5k"):
        d = root / name
        im, lab = MNIST_FILES[split]
        return load_idx(_resolve(d / im), _resolve(d / lab), split)
    if name == "cifar10":
        d = root / "cifar-10-batches-bin"
        return load_cifar_binary([_resolve(d / f) for f in CIFAR_FILES[split]], split)
    raise ParseError(f"unknown dataset {name!r}")


def class_balanced_subset(ds, per_class):
    """The first ``per_class`` examples of each class, in original order."""
    keep = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)[:per_class]
        keep.append(idx)
    return ds.subset(np.sort(np.concatenate(keep)))


def channel_stats(ds):
    x = ds.images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(ds, mean=None, std=None, dtype=np.float32):
    """Per-channel (x - mean) / std.

    Statistics default to the dataset's own; pass the training split's
    statistics when normalising an evaluation split.
    """
    if mean is None or std is None:
        mean, std = channel_stats(ds)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std == 0):
        raise NumericError(f"zero standard deviation in channel(s) {np.flatnonzero(std == 0).tolist()}")
    x = (ds.images.astype(np.float64) - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(ds, images=x.astype(dtype), mean=mean, std=std)


def augment(image, rng, pad=4, crop=None, flip=None):
    """Zero-pad by ``pad``, crop back to the original size, flip horizontally
    with probability 0.5.

    ``crop`` = (dy, dx) and ``flip`` (bool) force the random choices.
    """
    c, h, w = image.shape
    if crop is None:
        crop = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    dy, dx = crop
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    out = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images, rng, pad=4):
    return np.stack([augment(im, rng, pad) for im in images])


class BatchIterator:
    """Seeded per-epoch permutations of a dataset."""

    def __init__(self, ds, batch_size=64, seed=0, shuffle=True, augment=False):
        self.ds = ds
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.shuffle = shuffle
        self.augment = augment

    def __len__(self):
        return -(-len(self.ds) // self.batch_size)

    def epoch_order(self):
        n = len(self.ds)
        return self.rng.permutation(n) if self.shuffle else np.arange(n)

    def epoch(self):
        """Yield ``(images, labels, indices)`` batches covering every index once."""
        order = self.epoch_order()
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            x = self.ds.images[idx]
            if self.augment:
                x = augment_batch(x, self.rng)
            yield x, self.ds.labels[idx], idx

    def forever(self):
        while True:
            yield from self.epoch()
