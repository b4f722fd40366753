"""Deterministic synthetic multi-modal brain phantoms with layered lesions.

Each lesion is a ball with a necrotic core, an enhancing shell and an oedema
halo. The modalities reproduce the clinical pairing cues: T1Gd is T1 plus an
enhancement term on the enhancing shell only, and T2FLAIR equals T2 except
inside necrosis, where free water is suppressed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np
from scipy import ndimage

from .data import ED, ET, NCR, Subject
from .errors import ArgumentError

CORE_FRACTION = 0.4
SHELL_FRACTION = 0.65
BRAIN_FRACTION = 0.44

# (T1, T2) base intensities per tissue class
TISSUE = {0: (0.80, 0.50), NCR: (0.40, 1.40), ET: (0.60, 1.00), ED: (0.65, 1.20)}
FLAIR_NCR_FACTOR = 0.3


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (64, 64, 64)
    n_lesions: int = 1
    radius_range: Tuple[float, float] = (10.0, 14.0)
    enhancement_gain: float = 0.8
    noise_sigma: float = 0.03
    seed: int = 0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = "phantom"


def _brain_mask(dims) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    r2 = sum(((g - (d - 1) / 2) / (BRAIN_FRACTION * d)) ** 2 for g, d in zip(grids, dims))
    return r2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> Subject:
    dims = tuple(int(d) for d in spec.dims)
    lo, hi = spec.radius_range
    if min(dims) <= 0 or spec.n_lesions < 0 or lo <= 0 or hi < lo:
        raise ArgumentError(f"invalid phantom spec {spec}")
    if hi >= min(dims) / 2:
        raise ArgumentError(f"lesion radius {hi} must be < min(dims)/2 = {min(dims) / 2}")

    rng = np.random.default_rng(spec.seed)
    brain = _brain_mask(dims)
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")

    # precedence ED < ET < NCR where lesions overlap
    rank = np.zeros(dims, dtype=np.int8)
    for _ in range(spec.n_lesions):
        radius = float(rng.uniform(lo, hi))
        centre = []
        for d in dims:
            slack = max(0.0, BRAIN_FRACTION * d - radius) / np.sqrt(3)
            centre.append((d - 1) / 2 + float(rng.uniform(-slack, slack)))
        dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, centre)))
        rank = np.maximum(rank, np.where(dist < radius, 1, 0).astype(np.int8))
        rank = np.maximum(rank, np.where(dist < SHELL_FRACTION * radius, 2, 0).astype(np.int8))
        rank = np.maximum(rank, np.where(dist < CORE_FRACTION * radius, 3, 0).astype(np.int8))
    rank[~brain] = 0
    label = np.array([0, ED, ET, NCR], dtype=np.uint8)[rank]

    field = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=max(1.0, min(dims) / 8))
    field /= max(np.abs(field).max(), 1e-12)

    t1 = np.zeros(dims)
    t2 = np.zeros(dims)
    for code, (v1, v2) in TISSUE.items():
        region = brain & (label == code)
        t1[region] = v1 + 0.1 * field[region]
        t2[region] = v2 + 0.1 * field[region]
    et = label == ET
    ncr = label == NCR
    t1gd = t1 + spec.enhancement_gain * et
    flair = np.where(ncr, FLAIR_NCR_FACTOR * t2, t2)

    images = np.stack([t1, t1gd, t2, flair])
    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, size=images.shape)
        images = images + noise * brain
    return Subject(spec.id, images.astype(np.float32), spec.spacing, label)


def phantom_dataset(n: int, spec: PhantomSpec = PhantomSpec()) -> list:
    """``n`` phantoms with per-subject seeds spawned from ``spec.seed``."""
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(spec.seed).spawn(n)]
    return [generate_phantom(replace(spec, seed=s, id=f"case_{i:03d}")) for i, s in enumerate(seeds)]
