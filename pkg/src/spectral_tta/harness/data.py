"""Synthetic 10-class source task.

Each class is a parametric 32x32 pattern family (gratings, blobs, grids)
with per-sample jitter in frequency, phase, position, amplitude, and color,
plus mild pixel noise. Classes are separated by spatial structure, not
color, so corruption stresses the same cues the classifier relies on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 32
CHANNELS = 3
NUM_CLASSES = 10
TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 100

_YY, _XX = np.meshgrid(
    np.arange(IMAGE_SIZE, dtype=float), np.arange(IMAGE_SIZE, dtype=float), indexing="ij"
)


@dataclass(frozen=True)
class SourceTask:
    train_images: np.ndarray  # (N, 3, 32, 32) float64 in [0, 1]
    train_labels: np.ndarray  # (N,) int64
    test_images: np.ndarray
    test_labels: np.ndarray

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.train_images, self.train_labels, self.test_images, self.test_labels):
            h.update(arr.tobytes())
        return h.hexdigest()


def _luminance(label: int, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(0.3, 0.45)
    amp = rng.uniform(0.25, 0.4)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    freq = rng.uniform(2.5, 4.5)
    cy = rng.uniform(12.0, 20.0)
    cx = rng.uniform(12.0, 20.0)

    if label == 0:  # horizontal grating
        pattern = np.sin(2.0 * np.pi * freq * _YY / IMAGE_SIZE + phase)
    elif label == 1:  # vertical grating
        pattern = np.sin(2.0 * np.pi * freq * _XX / IMAGE_SIZE + phase)
    elif label == 2:  # diagonal grating
        pattern = np.sin(2.0 * np.pi * freq * (_XX + _YY) / (IMAGE_SIZE * np.sqrt(2.0)) + phase)
    elif label == 3:  # checker product
        phase2 = rng.uniform(0.0, 2.0 * np.pi)
        pattern = np.sin(2.0 * np.pi * freq * _XX / IMAGE_SIZE + phase) * np.sin(
            2.0 * np.pi * freq * _YY / IMAGE_SIZE + phase2
        )
    elif label == 4:  # filled disk
        radius = rng.uniform(6.0, 10.0)
        dist = np.hypot(_YY - cy, _XX - cx)
        pattern = np.clip((radius - dist) / 1.5, -1.0, 1.0)
    elif label == 5:  # ring
        radius = rng.uniform(8.0, 12.0)
        width = rng.uniform(2.0, 3.5)
        dist = np.hypot(_YY - cy, _XX - cx)
        pattern = 2.0 * np.exp(-(((dist - radius) / width) ** 2)) - 1.0
    elif label == 6:  # filled square
        half = rng.uniform(5.0, 8.0)
        pattern = np.clip(
            (half - np.maximum(np.abs(_YY - cy), np.abs(_XX - cx))) / 1.5, -1.0, 1.0
        )
    elif label == 7:  # plus sign
        arm_w = rng.uniform(1.5, 2.5)
        arm_l = rng.uniform(8.0, 12.0)
        horiz = (np.abs(_YY - cy) < arm_w) & (np.abs(_XX - cx) < arm_l)
        vert = (np.abs(_XX - cx) < arm_w) & (np.abs(_YY - cy) < arm_l)
        pattern = np.where(horiz | vert, 1.0, -1.0)
    elif label == 8:  # concentric rings
        wavelength = rng.uniform(5.0, 9.0)
        dist = np.hypot(_YY - cy, _XX - cx)
        pattern = np.sin(2.0 * np.pi * dist / wavelength + phase)
    elif label == 9:  # dot grid
        sigma = rng.uniform(1.2, 1.8)
        pattern = np.full_like(_YY, -1.0)
        for gy in (6.0, 16.0, 26.0):
            for gx in (6.0, 16.0, 26.0):
                py = gy + rng.uniform(-2.0, 2.0)
                px = gx + rng.uniform(-2.0, 2.0)
                bump = np.exp(-((_YY - py) ** 2 + (_XX - px) ** 2) / (2.0 * sigma**2))
                pattern = np.maximum(pattern, 2.0 * bump - 1.0)
    else:
        raise ValueError(f"unknown class {label}")

    return b + amp * pattern


def _render(label: int, rng: np.random.Generator) -> np.ndarray:
    lum = _luminance(label, rng)
    gains = rng.uniform(0.85, 1.15, size=CHANNELS)
    cast = rng.uniform(-0.04, 0.04, size=CHANNELS)
    img = lum[None, :, :] * gains[:, None, None] + cast[:, None, None]
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _generate(count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    images = np.empty((count, CHANNELS, IMAGE_SIZE, IMAGE_SIZE))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        labels[i] = i % NUM_CLASSES  # interleaved: exact balance by construction
        images[i] = _render(int(labels[i]), rng)
    return images, labels


def make_source_task(seed: int) -> SourceTask:
    """Deterministic 5000-train / 1000-test dataset, 10 balanced classes."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5eed]))
    train_images, train_labels = _generate(TRAIN_PER_CLASS * NUM_CLASSES, rng)
    test_images, test_labels = _generate(TEST_PER_CLASS * NUM_CLASSES, rng)
    return SourceTask(train_images, train_labels, test_images, test_labels)
