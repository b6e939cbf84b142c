"""Segmentation evaluation: per-class Dice and Average Symmetric Surface
Distance, aggregated per patient volume.

Conventions (the source method leaves them open): empty/empty masks score
Dice 1; empty-vs-nonempty scores Dice 0 and an undefined ASD, reported as
the sentinel `ASD_UNDEFINED` and excluded from averages.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np
import torch
from scipy.spatial.distance import cdist

ASD_UNDEFINED = float("nan")


@dataclass
class VolumeEval:
    patient_id: str
    dice: Dict[int, float]
    asd: Dict[int, float]


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p, g = pred.sum(), gt.sum()
    if p == 0 and g == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, gt).sum() / (p + g)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one background 4-neighbor (image border
    counts as background). Returns an N x 2 array of (row, col)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(mask & ~interior)


def asd(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0)) -> float:
    """Average symmetric surface distance over 2D boundary pixels."""
    bp = boundary_pixels(pred)
    bg = boundary_pixels(gt)
    if len(bp) == 0 or len(bg) == 0:
        return ASD_UNDEFINED
    sp = np.asarray(spacing, dtype=np.float64)
    d = cdist(bp * sp, bg * sp)
    return float((d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(bp) + len(bg)))


def _volume_boundary(mask3d: np.ndarray, spacing) -> np.ndarray:
    """Per-slice 2D boundaries stacked into 3D points (z from slice order)."""
    pts = []
    for z in range(mask3d.shape[0]):
        b = boundary_pixels(mask3d[z])
        if len(b):
            pts.append(np.column_stack([np.full(len(b), z, dtype=np.float64), b]))
    if not pts:
        return np.zeros((0, 3))
    return np.concatenate(pts, axis=0) * np.asarray(spacing, dtype=np.float64)


def asd_volume(pred3d: np.ndarray, gt3d: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    bp = _volume_boundary(np.asarray(pred3d, dtype=bool), spacing)
    bg = _volume_boundary(np.asarray(gt3d, dtype=bool), spacing)
    if len(bp) == 0 or len(bg) == 0:
        return ASD_UNDEFINED
    d = cdist(bp, bg)
    return float((d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(bp) + len(bg)))


def predict_labels(model, image: np.ndarray) -> np.ndarray:
    """Argmax segmentation of one slice."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        logits, _, _ = model(torch.as_tensor(image, dtype=dtype))
    return logits[0].argmax(dim=0).numpy()


def evaluate(model, samples: Sequence, num_classes: int,
             spacing=(1.0, 1.0, 1.0)) -> tuple:
    """Per-patient per-class Dice/ASD plus macro means over foreground classes.

    Slices are stacked by (patient_id, slice_index); metrics are computed per
    class over the stacked volume, then macro-averaged over classes and
    patients. Undefined ASDs are skipped in the averages.
    """
    by_patient: dict = {}
    for s in samples:
        if s.label is None:
            raise ValueError(f"evaluate needs labels; {s.patient_id}/{s.slice_index} has none")
        by_patient.setdefault(s.patient_id, []).append(s)
    evals = []
    for pid in sorted(by_patient):
        slices = sorted(by_patient[pid], key=lambda s: s.slice_index)
        gt = np.stack([s.label for s in slices])
        pred = np.stack([predict_labels(model, s.image) for s in slices])
        d, a = {}, {}
        for c in range(1, num_classes):
            d[c] = dice(pred == c, gt == c)
            a[c] = asd_volume(pred == c, gt == c, spacing)
        evals.append(VolumeEval(patient_id=pid, dice=d, asd=a))
    classes = range(1, num_classes)
    macro_dice = float(np.mean([[e.dice[c] for c in classes] for e in evals]))
    asd_vals = [e.asd[c] for e in evals for c in classes if np.isfinite(e.asd[c])]
    macro_asd = float(np.mean(asd_vals)) if asd_vals else ASD_UNDEFINED
    per_class_dice = {c: float(np.mean([e.dice[c] for e in evals])) for c in classes}
    summary = {"macro_dice": macro_dice, "macro_asd": macro_asd,
               "per_class_dice": per_class_dice}
    return evals, summary
