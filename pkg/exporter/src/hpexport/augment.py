"""Photometric augmentations on float RGB arrays.

Geometry is never touched: both views of an image must share the patch
grid so the engine can pair them index by index. Draw order is fixed, so a
given (seed, image, view) always produces the same view.
"""

from __future__ import annotations

import numpy as np

from .rng import derive_generator

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float32)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for o, w in enumerate(kernel):
        out += w * padded[o : o + img.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out2 = np.zeros_like(img)
    for o, w in enumerate(kernel):
        out2 += w * padded[:, o : o + img.shape[1]]
    return out2


def photometric_view(img: np.ndarray, seed: int, label: str) -> np.ndarray:
    """One augmented view of an (H, W, 3) float image in [0, 1]."""
    gen = derive_generator(seed, label)
    out = img.astype(np.float32).copy()

    out = out * gen.uniform(0.6, 1.4)  # brightness
    out = out.mean() + (out - out.mean()) * gen.uniform(0.6, 1.4)  # contrast
    gray = (out @ LUMA)[..., None]
    out = gray + (out - gray) * gen.uniform(0.6, 1.4)  # saturation
    if gen.uniform() < 0.2:  # random grayscale
        out = np.repeat((out @ LUMA)[..., None], 3, axis=2)
    if gen.uniform() < 0.5:  # gaussian blur
        out = _gaussian_blur(out, float(gen.uniform(0.1, 2.0)))
    return np.clip(out, 0.0, 1.0)
