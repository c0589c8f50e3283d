"""Dataset ingestion (MNIST IDX, CIFAR-10 binary) and synthetic generators.

Loaders are bit-exact against the published formats and fail with typed
errors on malformed files, never returning partial data. Pixels are scaled
to [0,1] so bounded-sample moment checks apply directly with a=0, b=1.
"""

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset", "SyntheticSpec", "DataFormatError", "BadMagicError",
    "TruncatedFileError", "MisalignedFileError", "load_mnist", "load_cifar10",
    "augment", "gen_synthetic", "make_moment_dataset", "write_cifar10_batch",
]

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073


class DataFormatError(Exception):
    """Base class for malformed dataset files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class MisalignedFileError(DataFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # [N,C,H,W] in [0,1]
    labels: np.ndarray   # [N] ints
    classes: int
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image/label count mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError("label outside class range")

    def __len__(self):
        return len(self.labels)

    def subset(self, n, seed=None):
        if seed is None:
            idx = np.arange(min(n, len(self)))
        else:
            idx = np.random.default_rng(seed).permutation(len(self))[:n]
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.name)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"file truncated while reading {what}")
    return buf


def load_mnist(images_path, labels_path):
    """Parse IDX image/label files into a [N,1,28,28] dataset scaled by 1/255."""
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "image magic"))
        if magic != MNIST_IMAGE_MAGIC:
            raise BadMagicError(f"image magic 0x{magic:08x}, expected 0x{MNIST_IMAGE_MAGIC:08x}")
        n, h, w = struct.unpack(">III", _read_exact(fh, 12, "image dimensions"))
        pixels = np.frombuffer(_read_exact(fh, n * h * w, "pixel data"), dtype=np.uint8)
        if fh.read(1):
            raise MisalignedFileError("trailing bytes after image data")
    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "label magic"))
        if magic != MNIST_LABEL_MAGIC:
            raise BadMagicError(f"label magic 0x{magic:08x}, expected 0x{MNIST_LABEL_MAGIC:08x}")
        (n_lab,) = struct.unpack(">I", _read_exact(fh, 4, "label count"))
        labels = np.frombuffer(_read_exact(fh, n_lab, "label data"), dtype=np.uint8)
    if n_lab != n:
        raise MisalignedFileError(f"{n} images but {n_lab} labels")
    images = (pixels.astype(np.float32) / 255.0).reshape(n, 1, h, w)
    return Dataset(images, labels.astype(np.int64), classes=10, name="mnist")


def load_cifar10(paths):
    """Parse CIFAR-10 binary batch files into a [N,3,32,32] dataset."""
    if not isinstance(paths, (list, tuple)):
        paths = [paths]
    chunks, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise MisalignedFileError(
                f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD_BYTES}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        lab = rec[:, 0]
        if lab.max() > 9:
            raise DataFormatError(f"{path}: label byte {lab.max()} out of range")
        labels.append(lab)
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(chunks).astype(np.float32) / 255.0
    return Dataset(images, np.concatenate(labels).astype(np.int64), classes=10, name="cifar10")


def write_cifar10_batch(path, images, labels):
    """Inverse of load_cifar10 for one batch file; images in [0,1]."""
    images = np.clip(np.asarray(images) * 255.0, 0, 255).round().astype(np.uint8)
    rec = np.empty((len(labels), CIFAR_RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images.reshape(len(labels), -1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def augment(images, flip_prob, seed):
    """Mirror each image about the vertical axis independently with flip_prob."""
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError(f"flip probability must be in [0,1], got {flip_prob}")
    if flip_prob == 0.0:
        return images
    rng = np.random.default_rng(seed)
    mask = rng.random(len(images)) < flip_prob
    out = images.copy()
    out[mask] = out[mask][:, :, :, ::-1]
    return out


@dataclass
class SyntheticSpec:
    distribution: str            # "gaussian" | "skewed" | "mixture"
    mu: float = 0.0
    sigma: float = 1.0
    skew_direction: int = 1      # sign of the third central moment, skewed mode
    channels: int = 1
    height: int = 8
    width: int = 8
    count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.distribution not in ("gaussian", "skewed", "mixture"):
            raise ValueError(f"unknown distribution: {self.distribution!r}")


def _skewed_noise(rng, shape, direction):
    # standardized gamma: zero mean, unit variance, skew sign = direction
    k = 1.0  # shape parameter; skewness 2/sqrt(k) = 2
    z = (rng.gamma(k, 1.0, size=shape) - k) / np.sqrt(k)
    return direction * z


def gen_synthetic(spec):
    """Draw per-channel samples from the specified distribution, seeded."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.count, spec.channels, spec.height, spec.width)
    if spec.distribution == "gaussian":
        eps = rng.standard_normal(shape)
    elif spec.distribution == "skewed":
        eps = _skewed_noise(rng, shape, np.sign(spec.skew_direction) or 1)
    else:
        pick = rng.random(shape) < 0.5
        eps = np.where(pick, rng.standard_normal(shape) - 1.5,
                       rng.standard_normal(shape) + 1.5)
    return spec.mu + spec.sigma * eps


# -- desk-scale classification stand-in --------------------------------

def make_moment_dataset(n, seed, classes=10, channels=3, size=32,
                        mu_jitter=0.05, sigma_active=1.0, sigma_decoy=0.3):
    """Classification task where the label is carried by one channel per
    sample and only channel statistics reveal which one.

    Each image has a single "active" channel whose spatial mean encodes the
    class; the remaining channels carry decoy means drawn from the same
    range. The active channel is marked statistically: higher variance and
    positive skew. Averaging over channels therefore mixes one real signal
    with decoys, while a model that can read per-channel variance or skew
    can gate out the decoys. Values are squashed to [0,1].
    """
    if classes < 2 or channels < 2:
        raise ValueError("need at least 2 classes and 2 channels")
    rng = np.random.default_rng(seed)
    class_mu = np.linspace(-0.9, 0.9, classes)
    labels = rng.integers(0, classes, size=n)
    active = rng.integers(0, channels, size=n)

    # decoy channels: symmetric low-variance noise around a fake mean
    decoy_mu = rng.uniform(-0.9, 0.9, size=(n, channels))
    images = (decoy_mu[:, :, None, None]
              + sigma_decoy * rng.standard_normal((n, channels, size, size)))
    # active channel: class mean plus high-variance, positively skewed noise
    mu = class_mu[labels] + mu_jitter * rng.standard_normal(n)
    noise = _skewed_noise(rng, (n, size, size), 1)
    images[np.arange(n), active] = mu[:, None, None] + sigma_active * noise

    # squash to [0,1] with a fixed logistic so moments stay informative
    images = 1.0 / (1.0 + np.exp(-images / 2.0))
    return Dataset(images.astype(np.float32), labels.astype(np.int64),
                   classes=classes, name="synthetic-moments")
