"""Seeded procedural textures: gradients, checkers, Gaussian blobs and value noise."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def _coords(size: int):
    t = np.linspace(0.0, 1.0, size, dtype=np.float64)
    return np.meshgrid(t, t, indexing="ij")


def _gradient(rng, size):
    yy, xx = _coords(size)
    a = rng.uniform(0, 2 * np.pi)
    return np.cos(a) * xx + np.sin(a) * yy


def _checker(rng, size):
    yy, xx = _coords(size)
    f = rng.integers(1, 4)
    a = rng.uniform(0, np.pi)
    u = np.cos(a) * xx + np.sin(a) * yy
    v = -np.sin(a) * xx + np.cos(a) * yy
    return ((np.floor(u * f) + np.floor(v * f)) % 2).astype(np.float64)


def _blobs(rng, size):
    yy, xx = _coords(size)
    out = np.zeros((size, size))
    for _ in range(rng.integers(2, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.04, 0.25)
        out += rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return out


def _value_noise(rng, size):
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for cells in (2, 4, 8):
        grid = rng.uniform(-1, 1, (cells + 1, cells + 1))
        out += amp * ndimage.zoom(grid, size / (cells + 1), order=1)[:size, :size]
        total += amp
        amp *= 0.55
    return out / total


_LAYERS = (_gradient, _checker, _blobs, _value_noise)


def make_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """One (3, size, size) float32 image in [0, 1]."""
    img = np.zeros((3, size, size))
    for _ in range(rng.integers(2, 4)):
        layer = _LAYERS[rng.integers(len(_LAYERS))](rng, size)
        layer = (layer - layer.min()) / (np.ptp(layer) + 1e-9)
        color = rng.uniform(-1, 1, 3)
        img += color[:, None, None] * layer[None] * rng.uniform(0.3, 1.0)
    img -= img.min(axis=(1, 2), keepdims=True)
    img /= img.max() + 1e-9
    img = 0.1 + 0.8 * img + rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def make_textures(n: int, size: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([make_texture(rng, size) for _ in range(n)])


class PatchDataset:
    """A fixed pool of images sampled as random crops with random flips."""

    def __init__(self, images: np.ndarray):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {images.shape}")
        self.images = images

    @classmethod
    def procedural(cls, n: int, size: int, seed: int = 0) -> PatchDataset:
        return cls(make_textures(n, size, seed))

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, rng: np.random.Generator, batch: int, patch: int) -> np.ndarray:
        n, _, h, w = self.images.shape
        if patch > h or patch > w:
            raise ValueError(f"patch size {patch} exceeds image size {h}x{w}")
        out = np.empty((batch, 3, patch, patch), dtype=np.float32)
        for b in range(batch):
            i = rng.integers(n)
            r, c = rng.integers(h - patch + 1), rng.integers(w - patch + 1)
            img = self.images[i, :, r:r + patch, c:c + patch]
            if rng.random() < 0.5:
                img = img[:, :, ::-1]
            out[b] = img
        return out
