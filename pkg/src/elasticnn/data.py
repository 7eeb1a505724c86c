"""Synthetic desk-scale image classification data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class SynthDataset:
    images: np.ndarray  # N x 3 x H x W, float32
    labels: np.ndarray  # N, int64
    num_classes: int
    seed: int

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} do not line up")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SynthDataset":
        return SynthDataset(self.images[idx], self.labels[idx], self.num_classes, self.seed)

    def split(self, train_fraction: float = 0.8) -> tuple["SynthDataset", "SynthDataset"]:
        """Deterministic shuffled train/validation split."""
        order = np.random.default_rng(self.seed + 1).permutation(len(self))
        cut = int(round(len(self) * train_fraction))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield ``(images, labels)`` mini-batches, shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]

    def astype(self, dtype) -> "SynthDataset":
        return SynthDataset(self.images.astype(dtype), self.labels, self.num_classes, self.seed)


def make_synth(n: int = 2048, num_classes: int = 4, size: int = 16, seed: int = 0, noise: float = 0.6) -> SynthDataset:
    """Class-conditional blobs over oriented gratings.

    Each class owns a grating orientation, a colour mix and a blob centre.
    Samples jitter the grating phase and frequency, move the blob and add
    pixel noise, so classes overlap enough that removing channels costs
    accuracy.  Labels are balanced to within one sample.
    """
    if num_classes < 2 or n < num_classes:
        raise DataError(f"need n >= num_classes >= 2, got n={n}, num_classes={num_classes}")
    rng = np.random.default_rng(seed)
    proto = np.random.default_rng(10_000 + num_classes)
    angles = np.pi * np.arange(num_classes) / num_classes
    colours = proto.uniform(-1, 1, size=(num_classes, 3))
    centres = proto.uniform(0.3, 0.7, size=(num_classes, 2)) * size

    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, c in enumerate(labels):
        theta = angles[c] + rng.normal(0, 0.15)
        freq = 2 * np.pi / rng.uniform(4.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        cy, cx = centres[c] + rng.normal(0, 1.5, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 2.5**2))
        pattern = 0.6 * grating + blob
        img = colours[c][:, None, None] * pattern[None] * 0.5 + 0.5 * grating[None] * 0.3
        img += rng.normal(0, noise, size=img.shape)
        images[i] = img
    return SynthDataset(images, labels.astype(np.int64), num_classes, seed)
