"""Dice / HD95 metrics, subject evaluation and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import REGIONS, GroupingScheme, Subject, cluster_regions
from .errors import IoError, MissingLabelError, ShapeError
from .inference import Blend, compose_prediction, predict_subject

HD95_SENTINEL = 373.13
CSV_COLUMNS = ["model", "dice_et", "dice_tc", "dice_wt", "dice_mean",
               "hd95_et", "hd95_tc", "hd95_wt", "hd95_mean"]


def _check(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask dims differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_score(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one background face-neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(mask.ndim, 1),
                                   border_value=0)
    return mask & ~inner


def surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Distance from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    dist = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dist[sa]


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    pred, gt = _check(pred, gt)
    p_any, g_any = pred.any(), gt.any()
    if not p_any and not g_any:
        return 0.0
    if not (p_any and g_any):
        return HD95_SENTINEL
    pooled = np.concatenate([surface_distances(pred, gt, spacing), surface_distances(gt, pred, spacing)])
    return float(np.percentile(pooled, 95))


@dataclass
class SubjectMetrics:
    subject: str
    dice: Dict[str, float]
    hd95: Dict[str, float]


@dataclass
class MetricsReport:
    model: str
    subjects: List[SubjectMetrics] = field(default_factory=list)

    def mean(self, metric: str, region: str) -> float:
        vals = [getattr(s, metric)[region] for s in self.subjects]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def aggregates(self) -> Dict[str, float]:
        out = {}
        for metric in ("dice", "hd95"):
            per_region = [self.mean(metric, r) for r in REGIONS]
            for r, v in zip(REGIONS, per_region):
                out[f"{metric}_{r}"] = v
            out[f"{metric}_mean"] = float(np.mean(per_region))
        return out

    @property
    def mean_dice(self) -> float:
        return self.aggregates["dice_mean"]

    def row(self) -> Dict[str, object]:
        return {"model": self.model, **self.aggregates}

    def to_dict(self) -> dict:
        return {"model": self.model, "subjects": [asdict(s) for s in self.subjects],
                "aggregates": self.aggregates}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["model"], [SubjectMetrics(**s) for s in d["subjects"]])


def score_masks(subject_id: str, pred, gt, spacing) -> SubjectMetrics:
    dice, dist = {}, {}
    for r in REGIONS:
        p, g = getattr(pred, r), getattr(gt, r)
        dice[r] = dice_score(p, g)
        dist[r] = hd95(p, g, spacing)
    return SubjectMetrics(subject_id, dice, dist)


def evaluate(model, subjects: Sequence[Subject], roi: int, overlap: float = 0.6, blend=Blend.GAUSSIAN,
             scheme=GroupingScheme.CLINICAL, name: str = "model", predictions: Optional[dict] = None
             ) -> MetricsReport:
    """Raw model output, thresholded, scored per region; no post-processing."""
    report = MetricsReport(name)
    for subject in subjects:
        if subject.label is None:
            raise MissingLabelError(f"subject {subject.id} has no label")
        probs = predict_subject(model, subject, roi, overlap, blend, scheme)
        pred = compose_prediction(probs)
        if predictions is not None:
            predictions[subject.id] = pred
        report.subjects.append(score_masks(subject.id, pred, cluster_regions(subject.label), subject.spacing))
    return report


def emit_report(report: MetricsReport, path, fmt: str = "csv") -> Path:
    path = Path(path)
    try:
        if fmt.lower() == "json":
            path.write_text(json.dumps(report.to_dict(), indent=2))
        else:
            write_rows([report.row()], path)
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc
    return path


def write_rows(rows: Sequence[dict], path, columns: Sequence[str] = CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def read_report(path) -> MetricsReport:
    try:
        return MetricsReport.from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise IoError(f"cannot read report {path}: {exc}") from exc
