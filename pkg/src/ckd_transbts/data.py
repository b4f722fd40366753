"""Subjects, portable volume I/O, region clustering and preprocessing."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ArgumentError,
    CoRegistrationError,
    EmptyVolumeError,
    IoError,
    LabelCodeError,
    MissingModality,
    ShapeError,
)

Dims = Tuple[int, int, int]
LABEL_CODES = (0, 1, 2, 4)
NCR, ED, ET = 1, 2, 4


class Modality(str, enum.Enum):
    T1 = "t1"
    T1GD = "t1gd"
    T2 = "t2"
    T2FLAIR = "t2flair"


MODALITIES: Tuple[Modality, ...] = (Modality.T1, Modality.T1GD, Modality.T2, Modality.T2FLAIR)


class Layout(str, enum.Enum):
    PORTABLE = "portable"
    BRATS = "brats"


class GroupingScheme(str, enum.Enum):
    """Rows of the fusion-strategy comparison, in table order."""

    PER_MODALITY = "per_modality"
    INPUT_CONCAT = "input_concat"
    SWAP_1 = "swap_1"
    SWAP_2 = "swap_2"
    CLINICAL = "clinical"


GROUPINGS: Dict[GroupingScheme, Tuple[Tuple[Modality, Modality], Tuple[Modality, Modality]]] = {
    GroupingScheme.CLINICAL: ((Modality.T1, Modality.T1GD), (Modality.T2, Modality.T2FLAIR)),
    GroupingScheme.SWAP_1: ((Modality.T1, Modality.T2), (Modality.T1GD, Modality.T2FLAIR)),
    GroupingScheme.SWAP_2: ((Modality.T1, Modality.T2FLAIR), (Modality.T1GD, Modality.T2)),
    # marker schemes keep the clinical channel order; the model decides the wiring
    GroupingScheme.INPUT_CONCAT: ((Modality.T1, Modality.T1GD), (Modality.T2, Modality.T2FLAIR)),
    GroupingScheme.PER_MODALITY: ((Modality.T1, Modality.T1GD), (Modality.T2, Modality.T2FLAIR)),
}


@dataclass(frozen=True)
class ModalityVolume:
    modality: Modality
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) <= 0:
            raise ShapeError(f"volume must be a non-empty 3D grid, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise ArgumentError(f"{self.modality.value}: non-finite voxel values")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ArgumentError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(self.voxels.shape)


def check_label(label: np.ndarray) -> np.ndarray:
    label = np.asarray(label)
    bad = np.setdiff1d(np.unique(label), LABEL_CODES)
    if bad.size:
        raise LabelCodeError(f"unknown label codes {bad.tolist()}; allowed {LABEL_CODES}")
    return label.astype(np.uint8)


@dataclass(frozen=True)
class Subject:
    """Four co-registered modalities stacked as (4, X, Y, Z) in ``MODALITIES`` order."""

    id: str
    images: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    label: Optional[np.ndarray] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 4 or images.shape[0] != len(MODALITIES):
            raise ShapeError(f"images must be (4, X, Y, Z), got {images.shape}")
        if min(images.shape[1:]) <= 0:
            raise ShapeError("empty spatial dims")
        if not np.all(np.isfinite(images)):
            raise ArgumentError(f"subject {self.id}: non-finite voxel values")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.label is not None:
            label = check_label(self.label)
            if label.shape != images.shape[1:]:
                raise CoRegistrationError(
                    f"label dims {label.shape} differ from modality dims {images.shape[1:]}"
                )
            object.__setattr__(self, "label", label)

    @classmethod
    def from_volumes(cls, id: str, volumes: Sequence[ModalityVolume], label=None) -> "Subject":
        by_mod = {v.modality: v for v in volumes}
        for mod in MODALITIES:
            if mod not in by_mod:
                raise MissingModality(f"subject {id}: missing modality {mod.value}")
        ref = by_mod[MODALITIES[0]]
        for mod in MODALITIES[1:]:
            v = by_mod[mod]
            if v.dims != ref.dims or not np.allclose(v.spacing, ref.spacing):
                raise CoRegistrationError(
                    f"subject {id}: {mod.value} dims/spacing {v.dims}/{v.spacing} "
                    f"differ from {ref.dims}/{ref.spacing}"
                )
        images = np.stack([by_mod[m].voxels for m in MODALITIES])
        return cls(id, images, ref.spacing, label)

    @property
    def dims(self) -> Dims:
        return tuple(self.images.shape[1:])

    def volume(self, modality: Modality) -> ModalityVolume:
        return ModalityVolume(modality, self.images[MODALITIES.index(Modality(modality))], self.spacing)

    def with_images(self, images: np.ndarray, label=...) -> "Subject":
        return replace(self, images=images, label=self.label if label is ... else label)


@dataclass(frozen=True)
class RegionMasks:
    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def stack(self) -> np.ndarray:
        """(3, X, Y, Z) boolean array in ET, TC, WT order."""
        return np.stack([self.et, self.tc, self.wt])

    def to_label(self) -> np.ndarray:
        """Back to sub-region codes; requires et <= tc <= wt."""
        label = np.zeros(self.wt.shape, dtype=np.uint8)
        label[self.wt] = ED
        label[self.tc] = NCR
        label[self.et] = ET
        return label


REGIONS = ("et", "tc", "wt")


def cluster_regions(label: np.ndarray) -> RegionMasks:
    label = check_label(label)
    et = label == ET
    tc = et | (label == NCR)
    wt = tc | (label == ED)
    return RegionMasks(et, tc, wt)


@dataclass(frozen=True)
class GroupedInput:
    """Two ordered modality pairs; ``tensor`` is (4, X, Y, Z) as group_a + group_b."""

    scheme: GroupingScheme
    group_a: Tuple[Modality, Modality]
    group_b: Tuple[Modality, Modality]
    tensor: np.ndarray

    @property
    def order(self) -> Tuple[Modality, ...]:
        return self.group_a + self.group_b


def group_modalities(subject: Subject, scheme: GroupingScheme = GroupingScheme.CLINICAL) -> GroupedInput:
    scheme = GroupingScheme(scheme)
    group_a, group_b = GROUPINGS[scheme]
    idx = [MODALITIES.index(m) for m in group_a + group_b]
    return GroupedInput(scheme, group_a, group_b, subject.images[idx])


# ---------------------------------------------------------------------------
# portable I/O

META_FILE = "meta.json"
LABEL_FILE = "label.u8raw"


def save_subject(subject: Subject, path) -> Path:
    """Write ``subject`` into directory ``path`` (created if needed)."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        for mod, vox in zip(MODALITIES, subject.images):
            np.ascontiguousarray(vox, dtype="<f4").tofile(path / f"{mod.value}.f32raw")
        if subject.label is not None:
            np.ascontiguousarray(subject.label, dtype=np.uint8).tofile(path / LABEL_FILE)
        meta = {
            "id": subject.id,
            "dims": list(subject.dims),
            "spacing": list(subject.spacing),
            "modalities": [m.value for m in MODALITIES],
            "label_codes": list(LABEL_CODES),
            "order": "C",
        }
        (path / META_FILE).write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise IoError(f"cannot write subject to {path}: {exc}") from exc
    return path


def _read_raw(file: Path, dtype, dims: Dims) -> np.ndarray:
    data = np.fromfile(file, dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise CoRegistrationError(
            f"{file.name}: {data.size} voxels, expected {int(np.prod(dims))} for dims {dims}"
        )
    return data.reshape(dims)


def _load_portable(path: Path) -> Subject:
    meta_file = path / META_FILE
    if not meta_file.exists():
        raise MissingModality(f"{path}: no {META_FILE}")
    meta = json.loads(meta_file.read_text())
    dims = tuple(int(d) for d in meta["dims"])
    volumes = []
    for mod in MODALITIES:
        file = path / f"{mod.value}.f32raw"
        if not file.exists():
            raise MissingModality(f"{path}: missing {file.name}")
        volumes.append(ModalityVolume(mod, _read_raw(file, "<f4", dims), tuple(meta["spacing"])))
    label = None
    if (path / LABEL_FILE).exists():
        label = check_label(_read_raw(path / LABEL_FILE, np.uint8, dims))
    return Subject.from_volumes(meta.get("id", path.name), volumes, label)


BRATS_SUFFIXES = {
    Modality.T1: "_t1",
    Modality.T1GD: "_t1ce",
    Modality.T2: "_t2",
    Modality.T2FLAIR: "_flair",
}


def _load_brats(path: Path) -> Subject:
    try:
        import nibabel as nib
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise IoError("reading the BRATS layout needs nibabel (pip install nibabel)") from exc

    def find(suffix):
        for ext in (".nii.gz", ".nii"):
            hits = sorted(path.glob(f"*{suffix}{ext}"))
            if hits:
                return hits[0]
        return None

    volumes = []
    for mod, suffix in BRATS_SUFFIXES.items():
        file = find(suffix)
        if file is None:
            raise MissingModality(f"{path}: no *{suffix}.nii[.gz] file")
        img = nib.load(str(file))
        volumes.append(ModalityVolume(mod, np.asarray(img.dataobj, dtype=np.float32), img.header.get_zooms()[:3]))
    label = None
    seg = find("_seg")
    if seg is not None:
        label = check_label(np.asarray(nib.load(str(seg)).dataobj).astype(np.int64))
    return Subject.from_volumes(path.name, volumes, label)


def load_subject(path, layout: Layout = Layout.PORTABLE) -> Subject:
    path = Path(path)
    if not path.is_dir():
        raise IoError(f"{path} is not a directory")
    if Layout(layout) is Layout.BRATS:
        return _load_brats(path)
    return _load_portable(path)


# ---------------------------------------------------------------------------
# preprocessing


def brain_bbox(images: np.ndarray) -> Tuple[int, int, int, int, int, int]:
    nonzero = np.any(images != 0, axis=0)
    if not nonzero.any():
        raise EmptyVolumeError("all modalities are zero")
    bounds = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(nonzero.any(axis=other))
        bounds += [int(hits[0]), int(hits[-1]) + 1]
    return tuple(bounds)


def crop_to_brain_bbox(subject: Subject):
    """Crop to the tight box of nonzero voxels; returns ``(subject, bbox)``."""
    x0, x1, y0, y1, z0, z1 = bbox = brain_bbox(subject.images)
    sl = (slice(x0, x1), slice(y0, y1), slice(z0, z1))
    label = None if subject.label is None else subject.label[sl]
    return subject.with_images(subject.images[(slice(None),) + sl], label), bbox


def uncrop(values: np.ndarray, bbox, dims: Dims) -> np.ndarray:
    """Place ``values`` (..., x, y, z) back into a zero volume of spatial ``dims``."""
    out = np.zeros(values.shape[:-3] + tuple(dims), dtype=values.dtype)
    x0, x1, y0, y1, z0, z1 = bbox
    out[..., x0:x1, y0:y1, z0:z1] = values
    return out


def normalize_array(vox: np.ndarray) -> np.ndarray:
    vox = np.asarray(vox, dtype=np.float32)
    mask = vox != 0
    if not mask.any():
        return vox.copy()
    vals = vox[mask].astype(np.float64)
    mean, std = vals.mean(), vals.std()
    out = np.zeros_like(vox)
    out[mask] = ((vals - mean) / (std if std > 0 else 1.0)).astype(np.float32)
    return out


def normalize(volume: ModalityVolume) -> ModalityVolume:
    """Z-score over nonzero voxels; background stays zero."""
    return ModalityVolume(volume.modality, normalize_array(volume.voxels), volume.spacing)


def normalize_subject(subject: Subject) -> Subject:
    return subject.with_images(np.stack([normalize_array(v) for v in subject.images]))


def _as_dims(size) -> Dims:
    if np.isscalar(size):
        size = (int(size),) * 3
    size = tuple(int(s) for s in size)
    if len(size) != 3:
        raise ArgumentError(f"size must have 3 entries, got {size}")
    return size


def pad_symmetric(arr: np.ndarray, size: Dims):
    """Zero-pad the last three axes up to ``size``; returns ``(array, before_pads)``."""
    spatial = arr.shape[-3:]
    before = [max(0, s - d) // 2 for d, s in zip(spatial, size)]
    pads = [(0, 0)] * (arr.ndim - 3) + [
        (b, max(0, s - d) - b) for b, d, s in zip(before, spatial, size)
    ]
    if not any(p for pair in pads for p in pair):
        return arr, tuple(before)
    return np.pad(arr, pads), tuple(before)


def random_crop(subject: Subject, size, rng: np.random.Generator) -> Subject:
    size = _as_dims(size)
    if min(size) <= 0:
        raise ArgumentError(f"crop size must be positive, got {size}")
    images, _ = pad_symmetric(subject.images, size)
    label = None
    if subject.label is not None:
        label, _ = pad_symmetric(subject.label, size)
    offsets = [int(rng.integers(0, d - s + 1)) for d, s in zip(images.shape[1:], size)]
    sl = tuple(slice(o, o + s) for o, s in zip(offsets, size))
    return subject.with_images(images[(slice(None),) + sl], None if label is None else label[sl])


def targets_from_label(label: np.ndarray) -> np.ndarray:
    """(3, X, Y, Z) float32 region targets (ET, TC, WT)."""
    return cluster_regions(label).stack().astype(np.float32)
