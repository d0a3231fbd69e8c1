"""One-to-one assignment of predicted boxes to ground-truth boxes for a single expression."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from .domain import DetectionInstance
from .errors import InstanceLimitExceeded
from .geometry import iou_matrix

OPTIMAL_LIMIT = 10
MATCHERS = ("greedy", "optimal")


@dataclass(frozen=True)
class MatchOutcome:
    tp_pairs: tuple[tuple[int, int, float], ...]
    fp_indices: tuple[int, ...]
    fn_indices: tuple[int, ...]
    tn: int

    @property
    def tp(self) -> int:
        return len(self.tp_pairs)

    @property
    def fp(self) -> int:
        return len(self.fp_indices)

    @property
    def fn(self) -> int:
        return len(self.fn_indices)


def _compatible(p: DetectionInstance, g: DetectionInstance, category_strict: bool) -> bool:
    if not category_strict or p.category is None or g.category is None:
        return True
    return p.category == g.category


def _eligibility(preds, gts, iou_threshold, category_strict):
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    ious = iou_matrix([p.box for p in preds], [g.box for g in gts])
    ok = ious >= iou_threshold
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if ok[i, j] and not _compatible(p, g, category_strict):
                ok[i, j] = False
    return ious, ok


def _outcome(pairs, n_preds, n_gts) -> MatchOutcome:
    pairs = tuple(sorted(pairs))
    matched_p = {p for p, _, _ in pairs}
    matched_g = {g for _, g, _ in pairs}
    return MatchOutcome(
        tp_pairs=pairs,
        fp_indices=tuple(i for i in range(n_preds) if i not in matched_p),
        fn_indices=tuple(j for j in range(n_gts) if j not in matched_g),
        tn=int(n_preds == 0 and n_gts == 0),
    )


def match_expression(
    preds: Sequence[DetectionInstance],
    gts: Sequence[DetectionInstance],
    iou_threshold: float = 0.5,
    category_strict: bool = True,
) -> MatchOutcome:
    """Score-ordered greedy matching.

    Predictions are visited by descending score (input order on ties); each
    claims the still-free ground truth it overlaps most, provided the overlap
    reaches ``iou_threshold``. IoU ties between ground truths resolve on box
    coordinates, so the result does not depend on ground-truth list order.
    """
    ious, ok = _eligibility(preds, gts, iou_threshold, category_strict)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    gt_key = [(g.box.as_list(), g.category or "") for g in gts]
    claimed: set[int] = set()
    pairs = []
    for i in order:
        best = None
        for j in range(len(gts)):
            if j in claimed or not ok[i, j]:
                continue
            if best is None or ious[i, j] > ious[i, best] or (
                ious[i, j] == ious[i, best] and gt_key[j] < gt_key[best]
            ):
                best = j
        if best is not None:
            claimed.add(best)
            pairs.append((i, best, float(ious[i, best])))
    return _outcome(pairs, len(preds), len(gts))


def match_expression_optimal(
    preds: Sequence[DetectionInstance],
    gts: Sequence[DetectionInstance],
    iou_threshold: float = 0.5,
    category_strict: bool = True,
) -> MatchOutcome:
    """Exhaustive search for the assignment with most true positives.

    Ties on the true-positive count go to the larger summed IoU. The search
    runs over (prediction, set of used ground truths) states, which covers
    every one-to-one assignment without listing them individually.
    """
    if len(preds) > OPTIMAL_LIMIT or len(gts) > OPTIMAL_LIMIT:
        raise InstanceLimitExceeded(
            f"optimal matcher handles at most {OPTIMAL_LIMIT} boxes per side, "
            f"got {len(preds)} predictions and {len(gts)} ground truths"
        )
    ious, ok = _eligibility(preds, gts, iou_threshold, category_strict)
    n, m = len(preds), len(gts)

    @lru_cache(maxsize=None)
    def best(i: int, used: int):
        if i == n:
            return (0, 0.0), ()
        score, choice = best(i + 1, used)
        for j in range(m):
            if ok[i, j] and not used >> j & 1:
                (tp, total), rest = best(i + 1, used | 1 << j)
                cand = (tp + 1, total + float(ious[i, j]))
                if cand > score:
                    score, choice = cand, ((i, j),) + rest
        return score, choice

    _, chosen = best(0, 0)
    pairs = [(i, j, float(ious[i, j])) for i, j in chosen]
    return _outcome(pairs, n, m)


def match(preds, gts, iou_threshold=0.5, matcher="greedy", category_strict=True) -> MatchOutcome:
    if matcher == "greedy":
        return match_expression(preds, gts, iou_threshold, category_strict)
    if matcher == "optimal":
        return match_expression_optimal(preds, gts, iou_threshold, category_strict)
    raise ValueError(f"matcher must be one of {MATCHERS}, got {matcher!r}")
