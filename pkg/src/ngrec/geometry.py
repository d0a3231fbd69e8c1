"""Box overlap measures on pixel-space boxes."""

from __future__ import annotations

import numpy as np

from .domain import BoundingBox


def _intersection(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = _intersection(a, b)
    if inter == 0.0:
        return 0.0
    # edge arithmetic can round the intersection slightly above the union
    return min(inter / (a.area() + b.area() - inter), 1.0)


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """IoU minus the fraction of the enclosing box not covered by the union."""
    inter = _intersection(a, b)
    union = a.area() + b.area() - inter
    ew = max(a.x + a.w, b.x + b.w) - min(a.x, b.x)
    eh = max(a.y + a.h, b.y + b.h) - min(a.y, b.y)
    enclosing = max(ew * eh, union)
    return min(inter / union, 1.0) - (enclosing - union) / enclosing


def iou_matrix(preds, gts) -> np.ndarray:
    """Pairwise IoU, shape (len(preds), len(gts)), over BoundingBox sequences."""
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = iou(p, g)
    return out
