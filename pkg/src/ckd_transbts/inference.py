"""Sliding-window whole-volume inference and region-mask composition."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from itertools import product
from typing import Callable, Sequence, Tuple

import numpy as np
import torch

from .data import GroupingScheme, RegionMasks, Subject, crop_to_brain_bbox, group_modalities, normalize_subject, \
    pad_symmetric, uncrop
from .errors import ShapeError


class Blend(str, enum.Enum):
    CONSTANT = "constant"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class SlidingWindowPlan:
    dims: Tuple[int, int, int]
    roi: Tuple[int, int, int]
    overlap: float
    starts: Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]
    blend: Blend = Blend.GAUSSIAN

    def windows(self):
        """Start corners of every window, x-major."""
        return list(product(*self.starts))


def axis_starts(dim: int, roi: int, overlap: float) -> Tuple[int, ...]:
    stride = max(1, math.floor(roi * (1 - overlap) + 1e-9))
    last = dim - roi
    starts, s = [], 0
    while True:
        starts.append(min(s, last))
        if s >= last:
            break
        s += stride
    return tuple(sorted(set(starts)))


def plan_windows(dims, roi, overlap: float = 0.6, blend=Blend.GAUSSIAN) -> SlidingWindowPlan:
    dims = (dims,) * 3 if np.isscalar(dims) else tuple(int(d) for d in dims)
    roi = (roi,) * 3 if np.isscalar(roi) else tuple(int(r) for r in roi)
    if not 0 <= overlap < 1:
        raise ShapeError(f"overlap must be in [0, 1), got {overlap}")
    if any(r > d for r, d in zip(roi, dims)) or min(roi) <= 0:
        raise ShapeError(f"roi {roi} does not fit in volume {dims}")
    starts = tuple(axis_starts(d, r, overlap) for d, r in zip(dims, roi))
    return SlidingWindowPlan(dims, roi, float(overlap), starts, Blend(blend))


def blend_weights(roi: Sequence[int], blend: Blend) -> np.ndarray:
    if Blend(blend) is Blend.CONSTANT:
        return np.ones(tuple(roi), dtype=np.float64)
    axes = []
    for r in roi:
        sigma = r / 8.0
        x = np.arange(r, dtype=np.float64) - (r - 1) / 2.0
        axes.append(np.exp(-0.5 * (x / sigma) ** 2))
    w = np.einsum("i,j,k->ijk", *axes)
    w /= w.max()
    return np.maximum(w, 1e-6)


def sliding_window_infer(model: Callable, volume, plan: SlidingWindowPlan) -> np.ndarray:
    """Blend per-window sigmoid probabilities over ``volume`` (C, X, Y, Z).

    ``model`` maps a (1, C, rx, ry, rz) tensor to (1, K, rx, ry, rz) logits.
    Returns float32 (K, X, Y, Z) probabilities.
    """
    vol = torch.as_tensor(np.asarray(volume))
    if tuple(vol.shape[1:]) != plan.dims:
        raise ShapeError(f"volume dims {tuple(vol.shape[1:])} do not match plan {plan.dims}")
    dtype = torch.float32
    if isinstance(model, torch.nn.Module):
        dtype = next(model.parameters(), torch.empty(0)).dtype
    weights = blend_weights(plan.roi, plan.blend)
    acc = None
    norm = np.zeros(plan.dims, dtype=np.float64)
    rx, ry, rz = plan.roi
    with torch.no_grad():
        for x, y, z in plan.windows():
            sl = (slice(x, x + rx), slice(y, y + ry), slice(z, z + rz))
            patch = vol[(slice(None),) + sl][None].to(dtype)
            probs = torch.sigmoid(model(patch))[0].double().numpy()
            if acc is None:
                acc = np.zeros((probs.shape[0],) + plan.dims, dtype=np.float64)
            acc[(slice(None),) + sl] += probs * weights
            norm[sl] += weights
    return (acc / norm).astype(np.float32)


def compose_prediction(probs: np.ndarray, threshold: float = 0.5) -> RegionMasks:
    """Threshold ET/TC/WT independently, then close the hierarchy upward."""
    et, tc, wt = (np.asarray(p) > threshold for p in probs[:3])
    tc = tc | et
    wt = wt | tc
    et = et & tc & wt
    return RegionMasks(et, tc, wt)


def predict_subject(model, subject: Subject, roi: int, overlap: float = 0.6, blend=Blend.GAUSSIAN,
                    scheme=GroupingScheme.CLINICAL) -> np.ndarray:
    """Full-volume (3, X, Y, Z) probabilities; zero outside the brain box."""
    norm = normalize_subject(subject)
    cropped, bbox = crop_to_brain_bbox(norm)
    grouped = group_modalities(cropped, scheme).tensor
    inner = grouped.shape[1:]
    target = tuple(max(d, roi) for d in inner)
    padded, before = pad_symmetric(grouped, target)
    plan = plan_windows(padded.shape[1:], roi, overlap, blend)
    probs = sliding_window_infer(model, padded, plan)
    sl = tuple(slice(b, b + d) for b, d in zip(before, inner))
    return uncrop(probs[(slice(None),) + sl], bbox, subject.dims)
