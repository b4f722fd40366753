"""Random spatial and intensity augmentation of subjects."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .data import Subject


@dataclass(frozen=True)
class AugmentParams:
    flip_prob: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    zoom_prob: float = 0.3
    zoom_range: Tuple[float, float] = (0.9, 1.1)
    noise_prob: float = 0.2
    noise_std: Tuple[float, float] = (0.0, 0.1)
    blur_prob: float = 0.2
    blur_sigma: Tuple[float, float] = (0.5, 1.0)
    contrast_prob: float = 0.2
    contrast_gamma: Tuple[float, float] = (0.8, 1.2)

    @classmethod
    def disabled(cls) -> "AugmentParams":
        return cls((0.0, 0.0, 0.0), 0.0, noise_prob=0.0, blur_prob=0.0, contrast_prob=0.0)


def zoom_coordinates(dims, factor: float) -> np.ndarray:
    """Source coordinates for a centre-anchored zoom that keeps the grid size."""
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    return np.stack([(g - (d - 1) / 2.0) / factor + (d - 1) / 2.0 for g, d in zip(grids, dims)])


def zoom_volume(vol: np.ndarray, factor: float, order: int) -> np.ndarray:
    coords = zoom_coordinates(vol.shape, factor)
    return ndimage.map_coordinates(vol, coords, order=order, mode="constant", cval=0).astype(vol.dtype)


def adjust_contrast(vol: np.ndarray, gamma: float) -> np.ndarray:
    lo, hi = float(vol.min()), float(vol.max())
    span = hi - lo
    if span <= 0:
        return vol
    return (((vol - lo) / span) ** gamma * span + lo).astype(np.float32)


def augment(subject: Subject, rng: np.random.Generator, params: AugmentParams = AugmentParams()) -> Subject:
    """Each transform fires independently with its own probability.

    Zoom and flips move the label with the images; noise, blur and contrast
    only touch the modalities.
    """
    images = subject.images
    label = subject.label

    if rng.random() < params.zoom_prob:
        factor = float(rng.uniform(*params.zoom_range))
        images = np.stack([zoom_volume(v, factor, order=1) for v in images])
        if label is not None:
            label = zoom_volume(label, factor, order=0)

    for axis, p in enumerate(params.flip_prob):
        if rng.random() < p:
            images = np.flip(images, axis=axis + 1)
            if label is not None:
                label = np.flip(label, axis=axis)

    if rng.random() < params.noise_prob:
        std = float(rng.uniform(*params.noise_std))
        images = images + rng.normal(0.0, std, size=images.shape).astype(np.float32)

    if rng.random() < params.blur_prob:
        sigma = float(rng.uniform(*params.blur_sigma))
        images = np.stack([ndimage.gaussian_filter(v, sigma) for v in images])

    if rng.random() < params.contrast_prob:
        gamma = float(rng.uniform(*params.contrast_gamma))
        images = np.stack([adjust_contrast(v, gamma) for v in images])

    images = np.ascontiguousarray(images, dtype=np.float32)
    if label is not None:
        label = np.ascontiguousarray(label)
    return subject.with_images(images, label)
