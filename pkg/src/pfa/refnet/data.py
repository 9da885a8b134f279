"""Procedural image classification data.

Each class is an oriented grating patch (orientation and spatial frequency
set by the class) placed at a random position with random phase, contrast
and colour, over a noisy background with a class-independent distractor
blob. Position and phase vary per sample, so pixel-space templates are
weak while a small convolutional net with global pooling separates the
classes easily.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidParams


@dataclass(frozen=True)
class SynthDataset:
    images: np.ndarray  # (N, H, W, C) float32
    labels: np.ndarray  # (N,) int64
    seed: int
    split: str
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, classes) -> "SynthDataset":
        """Samples of ``classes`` only, relabelled 0..len(classes)-1 in the given order."""
        classes = list(classes)
        mask = np.isin(self.labels, classes)
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap[c] for c in self.labels[mask]], dtype=np.int64)
        return SynthDataset(self.images[mask], labels, self.seed, self.split, len(classes))


def class_factors(k: int, num_classes: int) -> tuple[float, float]:
    """(orientation in radians, cycles per pixel) for class ``k``."""
    n_orient = min(num_classes, 4)
    theta = np.pi * (k % n_orient) / n_orient
    freq = 0.18 + 0.12 * (k // n_orient)
    return theta, freq


def generate_dataset(seed: int, num_classes: int, n: int, shape=(16, 16, 3),
                     split: str = "train", noise: float = 0.35) -> SynthDataset:
    if num_classes < 2:
        raise InvalidParams("need at least 2 classes")
    if n < 10 * num_classes:
        raise InvalidParams(f"need at least {10 * num_classes} samples for {num_classes} classes")
    h, w, c = shape
    # split name is folded into the stream so train and test never coincide
    rng = np.random.default_rng([seed, sum(split.encode())])
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    images = np.empty((n, h, w, c), dtype=np.float32)
    sigma = 0.22 * min(h, w)
    for i, k in enumerate(labels):
        theta, freq = class_factors(int(k), num_classes)
        theta += rng.normal(0, 0.08)
        cy, cx = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
        phase = rng.uniform(0, 2 * np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        env = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
        patch = env * np.cos(2 * np.pi * freq * u + phase) * rng.uniform(0.7, 1.3)
        colour = rng.uniform(0.4, 1.0, size=c) * rng.choice([-1.0, 1.0])
        by, bx = rng.uniform(0, h), rng.uniform(0, w)
        blob = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * (0.1 * h) ** 2))
        img = patch[..., None] * colour + 0.5 * blob[..., None] * rng.uniform(-1, 1, size=c)
        img += rng.normal(0, noise, size=(h, w, c))
        images[i] = img
    return SynthDataset(images, labels, seed, split, num_classes)


def nearest_centroid_accuracy(train: SynthDataset, test: SynthDataset) -> float:
    """Test accuracy of a nearest-class-mean classifier on raw pixels."""
    x = train.images.reshape(len(train), -1).astype(np.float64)
    centroids = np.stack([x[train.labels == k].mean(axis=0) for k in range(train.num_classes)])
    t = test.images.reshape(len(test), -1).astype(np.float64)
    d = ((t[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == test.labels))
