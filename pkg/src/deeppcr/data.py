"""IDX (MNIST) parsing and synthetic datasets.

The IDX header is a big-endian magic number followed by one big-endian
uint32 per dimension. Only unsigned-byte payloads are supported, which is
all MNIST uses: magic ``0x00000803`` for images (count, rows, cols) and
``0x00000801`` for labels (count).
"""

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "IdxFormatError",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxDimensionError",
    "IMAGES_MAGIC",
    "LABELS_MAGIC",
    "parse_idx_images",
    "parse_idx_labels",
    "idx_images_bytes",
    "idx_labels_bytes",
    "load_mnist",
    "mnist_dir",
    "MNIST_FILES",
    "synthetic_classification",
    "synthetic_gaussian",
    "DATA_DIR_ENV",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "DEEPPCR_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxDimensionError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"samples {x.shape} and labels {y.shape} do not pair up")
        if x.shape[0] == 0:
            raise ValueError("empty dataset")
        if np.any(y < 0) or np.any(y >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("features must lie in [0, 1]")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def feature_dim(self):
        return self.samples.shape[1]

    def subset(self, n):
        n = min(int(n), len(self))
        return Dataset(self.samples[:n], self.labels[:n], self.class_count)


def _header(data, magic, ndim):
    data = bytes(data)
    if len(data) < 4:
        raise IdxTruncatedError("stream shorter than the magic number")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxMagicError(f"magic 0x{found:08x}, expected 0x{magic:08x}")
    end = 4 + 4 * ndim
    if len(data) < end:
        raise IdxTruncatedError(f"header needs {end} bytes, stream has {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:end])
    need = int(np.prod(dims, dtype=np.int64))
    payload = len(data) - end
    if payload < need:
        raise IdxTruncatedError(f"dims {dims} need {need} payload bytes, got {payload}")
    if payload > need:
        raise IdxDimensionError(f"dims {dims} need {need} payload bytes, got {payload}")
    return dims, np.frombuffer(data, dtype=np.uint8, offset=end)


def parse_idx_images(data):
    """Images as row-major flattened vectors scaled to ``[0, 1]``."""
    (n, rows, cols), raw = _header(data, IMAGES_MAGIC, 3)
    return raw.reshape(n, rows * cols) / 255.0


def parse_idx_labels(data):
    (n,), raw = _header(data, LABELS_MAGIC, 1)
    return raw.astype(np.int64)


def idx_images_bytes(samples, rows, cols):
    """Inverse of :func:`parse_idx_images` for samples on the ``k/255`` grid."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != rows * cols:
        raise IdxDimensionError(f"samples {samples.shape} are not {rows}x{cols} images")
    raw = np.rint(samples * 255.0).astype(np.uint8)
    return struct.pack(">4I", IMAGES_MAGIC, samples.shape[0], rows, cols) + raw.tobytes()


def idx_labels_bytes(labels):
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels > 255):
        raise IdxDimensionError("labels must fit an unsigned byte")
    return struct.pack(">2I", LABELS_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def _read(path):
    for p in (path, path.with_name(path.name + ".gz")):
        if p.exists():
            if p.suffix == ".gz":
                with gzip.open(p, "rb") as f:
                    return f.read()
            return p.read_bytes()
    raise FileNotFoundError(f"{path} (or {path.name}.gz) not found")


def mnist_dir(data_dir=None):
    """Directory holding the MNIST files: argument, then ``$DEEPPCR_DATA_DIR``."""
    root = data_dir or os.environ.get(DATA_DIR_ENV)
    return Path(root) if root else None


def load_mnist(data_dir=None, split="train", limit=None):
    """Load an MNIST split from IDX files (optionally gzipped)."""
    root = mnist_dir(data_dir)
    if root is None:
        raise FileNotFoundError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    images, labels = MNIST_FILES[split]
    x = parse_idx_images(_read(root / images))
    y = parse_idx_labels(_read(root / labels))
    if x.shape[0] != y.shape[0]:
        raise IdxDimensionError(f"{x.shape[0]} images but {y.shape[0]} labels")
    if limit is not None:
        x, y = x[:limit], y[:limit]
    return Dataset(x, y, 10)


def synthetic_classification(n, feature_dim=784, class_count=10, seed=0, noise=0.1, separation=60.0,
                             center_seed=None):
    """Gaussian clusters around class centers, clipped to ``[0, 1]``.

    Centers are ``0.5 + (separation * noise / sqrt 2) * e_k`` along orthonormal
    directions ``e_k``, so any two centers are ``separation`` noise standard
    deviations apart. The default separation gives MNIST-like contrast
    between class means (about 0.5% of features clip). The centers come
    from ``center_seed`` (default ``seed``) and the samples from ``seed``, so
    a held-out split drawn with another ``seed`` and the same
    ``center_seed`` is the same task.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if class_count < 1 or feature_dim < class_count:
        raise ValueError("need 1 <= class_count <= feature_dim")
    crng = np.random.default_rng(seed if center_seed is None else center_seed)
    basis, _ = np.linalg.qr(crng.standard_normal((feature_dim, class_count)))
    centers = 0.5 + (separation * noise / np.sqrt(2.0)) * basis.T
    rng = np.random.default_rng([seed, 1])
    labels = rng.integers(0, class_count, size=n)
    x = centers[labels] + noise * rng.standard_normal((n, feature_dim))
    return Dataset(np.clip(x, 0.0, 1.0), labels, class_count)


def synthetic_gaussian(n, dim, seed=0):
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.random.default_rng(seed).standard_normal((n, dim))
