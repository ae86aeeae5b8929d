"""Built-in synthetic datasets and the raw-binary tiny-image format.

Everything is generated from a seed; no downloads, no external files
unless the raw-binary loader is used explicitly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class Dataset:
    train_inputs: np.ndarray
    train_labels: np.ndarray
    test_inputs: np.ndarray
    test_labels: np.ndarray

    @property
    def sample_shape(self):
        return self.train_inputs.shape[1:]


def _split(inputs, labels, test_fraction, rng):
    n = len(inputs)
    order = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test, train = order[:n_test], order[n_test:]
    return Dataset(inputs[train], labels[train], inputs[test], labels[test])


def gaussian_blobs(n: int, seed, spread: float = 1.0, separation: float = 2.0,
                   test_fraction: float = 0.5) -> Dataset:
    """Two Gaussian clusters in the plane, labels by cluster."""
    rng = np.random.default_rng(seed)
    half = n // 2
    c0 = rng.standard_normal((half, 2)) * spread + np.array([-separation, 0.0])
    c1 = rng.standard_normal((n - half, 2)) * spread + np.array([separation, 0.0])
    inputs = np.concatenate([c0, c1]).astype(np.float64)
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(n - half, dtype=np.int64)])
    return _split(inputs, labels, test_fraction, rng)


def two_moons(n: int, seed, noise: float = 0.1, test_fraction: float = 0.5) -> Dataset:
    """Two interleaving half circles."""
    rng = np.random.default_rng(seed)
    half = n // 2
    t0 = rng.uniform(0, np.pi, half)
    t1 = rng.uniform(0, np.pi, n - half)
    m0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    m1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    inputs = np.concatenate([m0, m1]) + noise * rng.standard_normal((n, 2))
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(n - half, dtype=np.int64)])
    return _split(inputs.astype(np.float64), labels, test_fraction, rng)


def striped_images(n: int, seed, size: int = 8, noise: float = 0.6,
                   test_fraction: float = 0.5) -> Dataset:
    """Two-class single-channel images: horizontal vs vertical bars under
    additive Gaussian noise. Convolution-friendly but not linearly trivial."""
    rng = np.random.default_rng(seed)
    inputs = np.zeros((n, 1, size, size))
    labels = rng.integers(0, 2, n).astype(np.int64)
    for i in range(n):
        img = np.zeros((size, size))
        row = int(rng.integers(1, size - 1))
        if labels[i] == 0:
            img[row, :] = 1.0
            img[row - 1, :] = 0.5
        else:
            img[:, row] = 1.0
            img[:, row - 1] = 0.5
        inputs[i, 0] = img + noise * rng.standard_normal((size, size))
    return _split(inputs, labels, test_fraction, rng)


# ---------------------------------------------------------------------------
# raw binary tiny-image format: 4 little-endian uint32 (count, H, W, C),
# then count*H*W*C uint8 pixels, then count uint8 labels.

_MAGIC_FMT = "<4I"


def write_raw_images(path, images: np.ndarray, labels: np.ndarray):
    images = np.asarray(images)
    if images.ndim != 4:
        raise ConfigError("data.path", "raw images must be (N, C, H, W)")
    n, c, h, w = images.shape
    pixels = np.clip(images, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(_MAGIC_FMT, n, h, w, c))
        fh.write(pixels.transpose(0, 2, 3, 1).tobytes())  # stored HWC
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def read_raw_images(path, test_fraction: float = 0.5, seed=0) -> Dataset:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize(_MAGIC_FMT))
        if len(header) != struct.calcsize(_MAGIC_FMT):
            raise ConfigError("data.path", f"{path}: truncated header")
        n, h, w, c = struct.unpack(_MAGIC_FMT, header)
        pix = np.frombuffer(fh.read(n * h * w * c), dtype=np.uint8)
        lab = np.frombuffer(fh.read(n), dtype=np.uint8)
    if pix.size != n * h * w * c or lab.size != n:
        raise ConfigError("data.path", f"{path}: truncated payload")
    images = pix.reshape(n, h, w, c).transpose(0, 3, 1, 2).astype(np.float64) / 255.0
    labels = lab.astype(np.int64)
    rng = np.random.default_rng(seed)
    return _split(images, labels, test_fraction, rng)


def load(kind: str, n: int, seed, **kwargs) -> Dataset:
    if kind == "blobs":
        return gaussian_blobs(n, seed, **kwargs)
    if kind == "moons":
        return two_moons(n, seed, **kwargs)
    if kind == "images":
        return striped_images(n, seed, **kwargs)
    raise ConfigError("data.kind", f"unknown dataset kind {kind!r}")
