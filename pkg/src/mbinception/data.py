"""Dataset loaders (IDX, CIFAR binary), preprocessing and splitting.

Images come out of the loaders as ``[N, H, W, C]`` float64 arrays scaled to
``[0, 1]``; labels as ``int64`` vectors.
"""

import gzip
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 32 * 32 * 3

# default file names inside a dataset root directory
DATASET_FILES = {
    "mnist": {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    },
    "fashion_mnist": {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    },
    "cifar10": {
        "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
        "test": ("test_batch.bin",),
    },
    "cifar100": {
        "train": ("train.bin",),
        "test": ("test.bin",),
    },
}
CLASS_COUNTS = {"mnist": 10, "fashion_mnist": 10, "cifar10": 10, "cifar100": 100}


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, indices, split=None):
        indices = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            images=self.images[indices],
            labels=self.labels[indices],
            split=split or self.split,
            source={**self.source, "records": int(indices.size)},
        )

    def head(self, count):
        count = min(int(count), len(self))
        return self.subset(np.arange(count))


def _read_bytes(path):
    path = os.fspath(path)
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path = path + ".gz"
    if not os.path.exists(path):
        raise DataError("missing dataset file", path=path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read(), path


def _parse_idx(raw, path, magic, ndim):
    if len(raw) < 4:
        raise DataError("truncated IDX header", path=path, offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", path=path, offset=0)
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataError("truncated IDX dimension header", path=path, offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    if len(raw) - header_len < count:
        raise DataError(
            f"truncated IDX payload: header declares {count} bytes, found {len(raw) - header_len}",
            path=path,
            offset=len(raw),
        )
    if len(raw) - header_len > count:
        raise DataError("trailing bytes after IDX payload", path=path, offset=header_len + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_len).reshape(dims)


def load_idx(images_path, labels_path):
    """Parse an IDX image/label pair into ``([N, rows, cols, 1] in [0,1], labels)``."""
    raw_images, images_path = _read_bytes(images_path)
    raw_labels, labels_path = _read_bytes(labels_path)
    pixels = _parse_idx(raw_images, images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(raw_labels, labels_path, IDX_LABELS_MAGIC, 1)
    if pixels.shape[0] != labels.shape[0]:
        raise DataError(
            f"image count {pixels.shape[0]} != label count {labels.shape[0]}", path=labels_path, offset=4
        )
    images = (pixels.astype(np.float64) / 255.0)[..., None]
    return images, labels.astype(np.int64)


def write_idx(images_path, labels_path, pixels, labels):
    """Write uint8 ``pixels [N, rows, cols]`` and ``labels [N]`` as IDX files."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *pixels.shape))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_cifar(paths, variant="cifar10"):
    """Decode CIFAR binary record files into ``([N, 32, 32, 3] in [0,1], labels)``.

    CIFAR-100 records carry a coarse and a fine label; the fine label is kept.
    """
    if variant == "cifar10":
        label_bytes = 1
    elif variant == "cifar100":
        label_bytes = 2
    else:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    record = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        raw, path = _read_bytes(path)
        if len(raw) % record:
            whole = len(raw) // record
            raise DataError(
                f"file length {len(raw)} is not a multiple of the {record}-byte record size",
                path=path,
                offset=whole * record,
            )
        rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(rows[:, label_bytes - 1].astype(np.int64))
        planar = rows[:, label_bytes:].reshape(-1, 3, 32, 32)
        images.append(planar.transpose(0, 2, 3, 1).astype(np.float64) / 255.0)
    if not images:
        raise DataError("no CIFAR files given")
    return np.concatenate(images), np.concatenate(labels)


def write_cifar(path, pixels_nhwc, labels, variant="cifar10", coarse=None):
    pixels = np.asarray(pixels_nhwc, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    planar = pixels.transpose(0, 3, 1, 2).reshape(pixels.shape[0], -1)
    cols = [labels[:, None]]
    if variant == "cifar100":
        coarse = np.zeros_like(labels) if coarse is None else np.asarray(coarse, dtype=np.uint8)
        cols = [coarse[:, None], labels[:, None]]
    with open(path, "wb") as fh:
        fh.write(np.concatenate(cols + [planar], axis=1).tobytes())


# -- preprocessing ---------------------------------------------------------------


def _bilinear(images, size):
    n, h, w, c = images.shape
    if (h, w) == (size, size):
        return images

    def coords(src, dst):
        pos = (np.arange(dst) + 0.5) * src / dst - 0.5
        pos = np.clip(pos, 0, src - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, size)
    x0, x1, fx = coords(w, size)
    top = images[:, y0] * (1 - fy)[None, :, None, None] + images[:, y1] * fy[None, :, None, None]
    return top[:, :, x0] * (1 - fx)[None, None, :, None] + top[:, :, x1] * fx[None, None, :, None]


def _pad_to(images, size):
    n, h, w, c = images.shape
    if h > size or w > size:
        raise ShapeError(f"cannot pad {h}x{w} images down to {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    return np.pad(images, ((0, 0), (top, size - h - top), (left, size - w - left), (0, 0)))


def preprocess(images, size=32, resize="pad"):
    """Bring raw images to ``[N, size, size, 3]``.

    Single-channel images are stacked three times. Smaller images are
    zero-padded to ``size`` (``resize="pad"``) or resampled bilinearly
    (``resize="bilinear"``).
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"expected [N, H, W, C] images, got {images.shape}")
    c = images.shape[-1]
    if c == 1:
        images = np.repeat(images, 3, axis=-1)
    elif c != 3:
        raise ShapeError(f"unsupported channel count {c}; expected 1 or 3")
    if images.shape[1:3] == (size, size):
        return images
    if resize == "pad":
        return _pad_to(images, size)
    if resize == "bilinear":
        return _bilinear(images, size)
    raise ConfigError(f"unknown resize method {resize!r}")


def split_validation(dataset, fraction=0.10, seed=0):
    """Seeded random partition into ``(train, validation)``; validation gets round(fraction*N)."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        raise ConfigError(f"validation split of {n} samples at fraction {fraction} leaves an empty subset")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "validation")


class BatchIterator:
    """Shuffled mini-batches; epoch ``e`` uses permutation seed ``(seed, e)``."""

    def __init__(self, dataset, batch_size, seed, shuffle=True):
        if batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle

    def indices(self, epoch):
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def epoch(self, epoch):
        order = self.indices(epoch)
        for start in range(0, order.size, self.batch_size):
            idx = order[start : start + self.batch_size]
            yield self.dataset.images[idx], self.dataset.labels[idx]

    def __len__(self):
        return -(-len(self.dataset) // self.batch_size)


# -- named datasets ----------------------------------------------------------------


def dataset_paths(name, root, split):
    try:
        files = DATASET_FILES[name][split]
    except KeyError:
        raise ConfigError(f"unknown dataset/split {name!r}/{split!r}") from None
    return [os.path.join(root, f) for f in files]


def load_raw(name, root, split):
    """Load a named dataset split without preprocessing."""
    paths = dataset_paths(name, root, split)
    if name in ("mnist", "fashion_mnist"):
        images, labels = load_idx(*paths)
    else:
        images, labels = load_cifar(paths, name)
    return LabeledDataset(images, labels, CLASS_COUNTS[name], split,
                          {"dataset": name, "files": [os.path.basename(p) for p in paths],
                           "records": int(labels.size)})


def load_dataset(name, root, split, resize="pad", limit=None):
    """Load, optionally truncate to the first ``limit`` records, and preprocess."""
    ds = load_raw(name, root, split)
    if limit:
        ds = ds.head(limit)
    return replace(ds, images=preprocess(ds.images, resize=resize))
