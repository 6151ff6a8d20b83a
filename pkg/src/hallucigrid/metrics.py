"""Evaluation metrics for completed road layouts and voxel shapes.

Segmentation scores (pixel accuracy, two-class mean IoU) are computed per
sample over a region, either the full grid or only the cells that were not
observed, and averaged over samples. Contour scores compare road boundaries,
optionally relaxed by dilating each boundary with a disk of radius ``r``.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

DEFAULT_RADII = tuple(range(6))


@dataclass(frozen=True)
class SegScores:
    pixel_accuracy: float
    mean_iou: float
    region: str  # "full" | "unobserved"


@dataclass(frozen=True)
class ContourScores:
    precision: float
    recall: float
    f_measure: float
    radius: int


@dataclass(frozen=True)
class VoxelGrid:
    cells: np.ndarray

    def __post_init__(self):
        cells = np.array(self.cells, dtype=bool)
        if cells.ndim != 3:
            raise ValueError(f"voxel grid must be 3-D, got shape {cells.shape}")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.cells.shape

    def __array__(self, dtype=None, copy=None):
        return self.cells if dtype is None else self.cells.astype(dtype)


def _operands(pred, gt, region):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    region = np.ones(pred.shape, dtype=bool) if region is None else np.asarray(region, dtype=bool)
    if region.shape != pred.shape:
        raise ValueError(f"region shape {region.shape} != {pred.shape}")
    if not region.any():
        raise ValueError("empty evaluation region")
    return pred, gt, region


def pixel_accuracy(pred, gt, region=None) -> float:
    pred, gt, region = _operands(pred, gt, region)
    return float(np.count_nonzero((pred == gt) & region) / np.count_nonzero(region))


def mean_iou(pred, gt, region=None) -> float:
    """Mean over {road, non-road} of intersection / union inside ``region``.

    A class whose union is empty in the region is left out of the mean.
    """
    pred, gt, region = _operands(pred, gt, region)
    ious = []
    for p, g in ((pred, gt), (~pred, ~gt)):
        union = np.count_nonzero((p | g) & region)
        if union:
            ious.append(np.count_nonzero(p & g & region) / union)
    return float(sum(ious) / len(ious))


def extract_boundary(grid) -> np.ndarray:
    """Road cells with at least one non-road 4-neighbour; the image border does not count."""
    road = np.asarray(grid, dtype=bool)
    padded = np.pad(road, 1, mode="constant", constant_values=True)
    neighbours_all_road = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return road & ~neighbours_all_road


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= r * r


def dilate(mask, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(radius))


def contour_prf(pred, gt, r: int = 0) -> ContourScores:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    bp, bg = extract_boundary(pred), extract_boundary(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p:
        precision = np.count_nonzero(bp & dilate(bg, r)) / n_p
    else:
        precision = 1.0 if n_g == 0 else 0.0
    if n_g:
        recall = np.count_nonzero(bg & dilate(bp, r)) / n_g
    else:
        recall = 1.0 if n_p == 0 else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ContourScores(float(precision), float(recall), float(f), int(r))


def hamming_distance(pred, gt) -> float:
    """Fraction of cells (voxels) that differ."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    return float(np.count_nonzero(pred != gt) / pred.size)


# --------------------------------------------------------------------------
# dataset-level evaluation


def evaluation_workers() -> int:
    try:
        return max(1, int(os.environ.get("HALLUCIGRID_THREADS", "1")))
    except ValueError:
        return 1


def score_sample(pred, gt, observed=None, radii: Sequence[int] = DEFAULT_RADII) -> dict:
    row = {
        "pixel_accuracy_full": pixel_accuracy(pred, gt),
        "mean_iou_full": mean_iou(pred, gt),
        "pixel_accuracy_unobserved": None,
        "mean_iou_unobserved": None,
    }
    if observed is not None:
        hidden = ~np.asarray(observed, dtype=bool)
        if hidden.any():
            row["pixel_accuracy_unobserved"] = pixel_accuracy(pred, gt, hidden)
            row["mean_iou_unobserved"] = mean_iou(pred, gt, hidden)
    row["contour"] = [asdict(contour_prf(pred, gt, r)) for r in radii]
    return row


@dataclass
class EvaluationReport:
    per_sample: list[dict]
    radii: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.per_sample)

    @property
    def means(self) -> dict:
        out = {}
        for key in ("pixel_accuracy_full", "mean_iou_full", "pixel_accuracy_unobserved", "mean_iou_unobserved"):
            vals = [row[key] for row in self.per_sample if row[key] is not None]
            out[key] = float(np.mean(vals)) if vals else None
        for i, r in enumerate(self.radii):
            for key in ("precision", "recall", "f_measure"):
                out[f"{key}_r{r}"] = float(np.mean([row["contour"][i][key] for row in self.per_sample]))
        return out

    def relaxation_curve(self) -> list[tuple[int, float, float, float]]:
        m = self.means
        return [(r, m[f"precision_r{r}"], m[f"recall_r{r}"], m[f"f_measure_r{r}"]) for r in self.radii]

    def to_json(self) -> dict:
        return {"radii": list(self.radii), "means": self.means, "per_sample": self.per_sample}

    @classmethod
    def from_json(cls, data: dict) -> "EvaluationReport":
        return cls(data["per_sample"], tuple(data["radii"]))

    def write(self, json_path, curve_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        if curve_path is not None:
            write_relaxation_csv(curve_path, self.relaxation_curve())


def write_relaxation_csv(path, rows, label: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["config"] if label is not None else []) + ["r", "precision", "recall", "f_measure"])
        for r, p, rc, f in rows:
            w.writerow(([label] if label is not None else []) + [r, repr(p), repr(rc), repr(f)])


def evaluate(preds, gts, observed=None, radii: Sequence[int] = DEFAULT_RADII) -> EvaluationReport:
    """Score a stack of binary predictions against ground truth, sample by sample."""
    preds, gts = np.asarray(preds, dtype=bool), np.asarray(gts, dtype=bool)
    if preds.shape != gts.shape:
        raise ValueError(f"dimension mismatch: {preds.shape} vs {gts.shape}")
    obs = [None] * len(preds) if observed is None else list(np.asarray(observed, dtype=bool))
    radii = tuple(int(r) for r in radii)
    jobs = list(zip(preds, gts, obs))
    workers = evaluation_workers()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda j: score_sample(*j, radii=radii), jobs))
    else:
        rows = [score_sample(*j, radii=radii) for j in jobs]
    return EvaluationReport(rows, radii)
