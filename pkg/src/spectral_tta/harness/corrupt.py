"""Deterministic synthetic corruptions at five severities.

Ten kinds spanning noise, blur, photometric, and digital degradation. The
per-severity strength tables below are fixed; given (kind, severity, seed,
image) the corrupted image is fully determined, independent of batch
composition, because stochastic kinds draw their randomness from a digest
of the image content plus the parameters.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur_proxy",
    "motion_blur_proxy",
    "brightness",
    "contrast",
    "pixelate",
    "jpeg_proxy",
    "fog_proxy",
)

# strength tables, index = severity - 1
GAUSSIAN_SIGMA = (0.06, 0.11, 0.18, 0.26, 0.36)
SHOT_PHOTONS = (60.0, 30.0, 15.0, 8.0, 4.0)
IMPULSE_FRACTION = (0.04, 0.08, 0.13, 0.19, 0.27)
BOX_BLUR_SIZE = (3, 5, 7, 9, 11)
MOTION_LENGTH = (3, 5, 7, 9, 12)
BRIGHTNESS_DELTA = (0.10, 0.18, 0.26, 0.34, 0.44)
CONTRAST_SCALE = (0.55, 0.40, 0.28, 0.19, 0.12)
PIXELATE_BLOCK = (2, 4, 4, 8, 16)
JPEG_QUANT_STEP = (0.12, 0.22, 0.38, 0.60, 0.95)
FOG_BLEND = (0.25, 0.40, 0.52, 0.65, 0.78)


def _image_rng(image: np.ndarray, kind: str, severity: int, seed: int) -> np.random.Generator:
    digest = hashlib.blake2b(digest_size=16)
    digest.update(kind.encode())
    digest.update(struct.pack("<qq", int(severity), int(seed)))
    digest.update(np.ascontiguousarray(image).tobytes())
    words = np.frombuffer(digest.digest(), dtype=np.uint64)
    return np.random.default_rng(np.random.SeedSequence(list(words)))


def _per_image(images, fn):
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        out[i] = fn(images[i])
    return out


def corrupt(images: np.ndarray, kind: str, severity: int, seed: int = 0) -> np.ndarray:
    """Corrupt a (N, C, H, W) batch in [0, 1]; severity 0 is the identity hook."""
    if kind not in KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    if not 0 <= severity <= 5:
        raise ValueError(f"severity must be in [0, 5], got {severity}")
    images = np.asarray(images, dtype=np.float64)
    if severity == 0:
        return images.copy()
    s = severity - 1

    if kind == "gaussian_noise":
        sigma = GAUSSIAN_SIGMA[s]

        def fn(img):
            rng = _image_rng(img, kind, severity, seed)
            return img + sigma * rng.standard_normal(img.shape)

        out = _per_image(images, fn)

    elif kind == "shot_noise":
        photons = SHOT_PHOTONS[s]

        def fn(img):
            rng = _image_rng(img, kind, severity, seed)
            return rng.poisson(np.clip(img, 0.0, 1.0) * photons) / photons

        out = _per_image(images, fn)

    elif kind == "impulse_noise":
        frac = IMPULSE_FRACTION[s]

        def fn(img):
            rng = _image_rng(img, kind, severity, seed)
            hits = rng.random(img.shape) < frac
            salt = rng.random(img.shape) < 0.5
            return np.where(hits, np.where(salt, 1.0, 0.0), img)

        out = _per_image(images, fn)

    elif kind == "defocus_blur_proxy":
        k = BOX_BLUR_SIZE[s]
        out = ndimage.uniform_filter(images, size=(1, 1, k, k), mode="reflect")

    elif kind == "motion_blur_proxy":
        length = MOTION_LENGTH[s]
        kernel = np.zeros((1, 1, length, length))
        for i in range(length):
            kernel[0, 0, i, i] = 1.0 / length  # fixed diagonal streak
        out = ndimage.convolve(images, kernel, mode="reflect")

    elif kind == "brightness":
        out = images + BRIGHTNESS_DELTA[s]

    elif kind == "contrast":
        scale = CONTRAST_SCALE[s]
        means = images.mean(axis=(1, 2, 3), keepdims=True)
        out = (images - means) * scale + means

    elif kind == "pixelate":
        block = PIXELATE_BLOCK[s]
        n, c, h, w = images.shape
        pooled = images.reshape(n, c, h // block, block, w // block, block).mean(axis=(3, 5))
        out = np.repeat(np.repeat(pooled, block, axis=2), block, axis=3)

    elif kind == "jpeg_proxy":
        step = JPEG_QUANT_STEP[s]
        n, c, h, w = images.shape
        blocks = images.reshape(n, c, h // 8, 8, w // 8, 8).transpose(0, 1, 2, 4, 3, 5)
        coef = dctn(blocks, axes=(-2, -1), norm="ortho")
        coef = np.round(coef / step) * step
        rec = idctn(coef, axes=(-2, -1), norm="ortho")
        out = rec.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    elif kind == "fog_proxy":
        blend = FOG_BLEND[s]

        def fn(img):
            rng = _image_rng(img, kind, severity, seed)
            coarse = rng.uniform(0.0, 1.0, (4, 4))
            haze = ndimage.zoom(coarse, img.shape[-1] / 4.0, order=1, mode="nearest")
            field = 0.55 + 0.45 * haze
            return (1.0 - blend) * img + blend * field[None, :, :]

        out = _per_image(images, fn)

    return np.clip(out, 0.0, 1.0)
