"""Instance- and image-level grounding metrics computed from per-expression match outcomes."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .domain import DetectionInstance, ExpressionRecord, PredictionRecord, ScaleClass
from .errors import (
    DuplicatePrediction,
    EmptyTally,
    InvariantViolation,
    LengthMismatch,
    NoNegativeSamples,
)
from .matching import MatchOutcome, match
from .ngdino import bin_of

logger = logging.getLogger(__name__)

PR_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class Tally:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"tally counts must be non-negative: {self}")

    def __add__(self, other: "Tally") -> "Tally":
        return Tally(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def instance_metrics(tally: Tally) -> tuple[float, float]:
    """Return (accuracy, F1) from a tally; F1 is 0 when it has no positive terms."""
    if tally.total == 0:
        raise EmptyTally("accuracy is undefined for an empty tally")
    acc = (tally.tp + tally.tn) / tally.total
    denom = 2 * tally.tp + tally.fp + tally.fn
    f1 = 2 * tally.tp / denom if denom else 0.0
    return acc, f1


def instance_outcome(m: MatchOutcome, has_targets: bool) -> Tally:
    if has_targets:
        return Tally(tp=m.tp, fp=m.fp, fn=m.fn)
    if m.fp == 0:
        return Tally(tn=1)
    return Tally(fp=m.fp)


def image_level_outcome(m: MatchOutcome, has_targets: bool) -> Tally:
    """Whole-expression outcome: exact set agreement or a single FP."""
    if has_targets:
        return Tally(tp=1) if m.fp == 0 and m.fn == 0 else Tally(fp=1)
    return Tally(tn=1) if m.fp == 0 else Tally(fp=1)


def expression_is_perfect(m: MatchOutcome) -> bool:
    # per-expression instance F1 == 1
    return m.tp > 0 and m.fp == 0 and m.fn == 0


def pr_at(
    cases: Sequence[tuple[Sequence[DetectionInstance], Sequence[DetectionInstance]]],
    threshold: float,
    matcher: str = "greedy",
    category_strict: bool = True,
) -> float:
    """Fraction of targeted (predictions, ground truths) cases matched perfectly at ``threshold``.

    Returns NaN when no case has targets.
    """
    targeted = [(p, g) for p, g in cases if g]
    if not targeted:
        return float("nan")
    hits = sum(expression_is_perfect(match(p, g, threshold, matcher, category_strict)) for p, g in targeted)
    return hits / len(targeted)


def n_acc(prediction_counts: Sequence[int]) -> float:
    """Share of no-target expressions answered with an empty set."""
    if not prediction_counts:
        raise NoNegativeSamples("n_acc needs at least one no-target expression")
    return sum(1 for c in prediction_counts if c == 0) / len(prediction_counts)


def scale_tallies(
    m: MatchOutcome, preds: Sequence[DetectionInstance], gts: Sequence[DetectionInstance]
) -> dict[ScaleClass, Tally]:
    """Split one outcome across size strata.

    TP and FN follow the ground-truth box's stratum, FP the predicted box's.
    """
    out: dict[ScaleClass, Tally] = {}

    def bump(scale, **kw):
        out[scale] = out.get(scale, Tally()) + Tally(**kw)

    for _, j, _ in m.tp_pairs:
        bump(gts[j].box.scale_class(), tp=1)
    for j in m.fn_indices:
        bump(gts[j].box.scale_class(), fn=1)
    for i in m.fp_indices:
        bump(preds[i].box.scale_class(), fp=1)
    return out


def scale_stratified_acc(
    outcomes: Sequence[tuple[MatchOutcome, Sequence[DetectionInstance], Sequence[DetectionInstance]]],
) -> dict[ScaleClass, float]:
    totals: dict[ScaleClass, Tally] = {}
    for m, preds, gts in outcomes:
        for scale, t in scale_tallies(m, preds, gts).items():
            totals[scale] = totals.get(scale, Tally()) + t
    return {s: instance_metrics(totals[s])[0] for s in ScaleClass if s in totals and totals[s].total}


def count_metrics(predicted_bins: Sequence[int], true_counts: Sequence[int]) -> tuple[float, float]:
    """MAE and exact-match rate between predicted bin indices and binned true counts."""
    if len(predicted_bins) != len(true_counts):
        raise LengthMismatch(f"{len(predicted_bins)} predictions vs {len(true_counts)} counts")
    if not true_counts:
        raise LengthMismatch("count metrics need at least one sample")
    true_bins = [bin_of(n) for n in true_counts]
    errs = [abs(int(p) - t) for p, t in zip(predicted_bins, true_bins)]
    mae = sum(errs) / len(errs)
    acc = sum(1 for e in errs if e == 0) / len(errs)
    return mae, acc


@dataclass(frozen=True)
class MetricReport:
    acc_inst: float
    f1_inst: float
    acc_img: float
    f1_img: float
    pr_at: dict[float, float]
    n_acc: float | None
    acc_by_scale: dict[ScaleClass, float]
    count_mae: float | None
    count_bin_accuracy: float | None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc_inst": self.acc_inst,
            "f1_inst": self.f1_inst,
            "acc_img": self.acc_img,
            "f1_img": self.f1_img,
            "pr_at": {f"{t:.1f}": v for t, v in sorted(self.pr_at.items())},
            "n_acc": self.n_acc,
            "acc_by_scale": {s.value: v for s, v in self.acc_by_scale.items()},
            "count_mae": self.count_mae,
            "count_bin_accuracy": self.count_bin_accuracy,
            "config": dict(self.config),
        }

    def summary(self) -> str:
        lines = [
            f"F1_inst  {self.f1_inst * 100:6.2f}   Acc_inst {self.acc_inst * 100:6.2f}",
            f"F1_img   {self.f1_img * 100:6.2f}   Acc_img  {self.acc_img * 100:6.2f}",
        ]
        if self.pr_at:
            lines.append("  ".join(f"Pr@{t:.1f} {v * 100:6.2f}" for t, v in sorted(self.pr_at.items())))
        if self.n_acc is not None:
            lines.append(f"N-acc    {self.n_acc * 100:6.2f}")
        if self.acc_by_scale:
            lines.append("  ".join(f"Acc_{s.value[0]} {v * 100:6.2f}" for s, v in self.acc_by_scale.items()))
        if self.count_mae is not None:
            lines.append(f"count MAE {self.count_mae:.4f}   count acc {self.count_bin_accuracy * 100:6.2f}")
        return "\n".join(lines)


@dataclass(frozen=True)
class ExpressionResult:
    instance: Tally
    image: Tally
    strata: dict[ScaleClass, Tally]
    perfect_at: dict[float, bool]
    answered_empty: bool
    has_targets: bool


def _evaluate_one(gt: ExpressionRecord, preds, iou_threshold, matcher, category_strict, thresholds):
    gts = gt.targets
    m = match(preds, gts, iou_threshold, matcher, category_strict)
    has_targets = bool(gts)
    perfect = {}
    if has_targets:
        for t in thresholds:
            mt = m if t == iou_threshold else match(preds, gts, t, matcher, category_strict)
            perfect[t] = expression_is_perfect(mt)
    return ExpressionResult(
        instance=instance_outcome(m, has_targets),
        image=image_level_outcome(m, has_targets),
        strata=scale_tallies(m, preds, gts),
        perfect_at=perfect,
        answered_empty=not preds,
        has_targets=has_targets,
    )


def align_predictions(
    gt_records: Sequence[ExpressionRecord], pred_records: Sequence[PredictionRecord]
) -> list[tuple[DetectionInstance, ...]]:
    """Predicted boxes per ground-truth record; missing answers become empty sets."""
    known = {r.expression_id for r in gt_records}
    by_id: dict[str, tuple[DetectionInstance, ...]] = {}
    for p in pred_records:
        if p.expression_id in by_id:
            raise DuplicatePrediction(f"expression {p.expression_id!r} predicted more than once", p.expression_id)
        if p.expression_id not in known:
            raise InvariantViolation(f"prediction for unknown expression {p.expression_id!r}", p.expression_id)
        by_id[p.expression_id] = p.boxes
    missing = [r.expression_id for r in gt_records if r.expression_id not in by_id]
    if missing:
        logger.warning("%d expression(s) without predictions scored as empty answers, e.g. %s",
                       len(missing), missing[:3])
    return [by_id.get(r.expression_id, ()) for r in gt_records]


def evaluate(
    gt_records: Sequence[ExpressionRecord],
    pred_records: Sequence[PredictionRecord],
    *,
    iou_threshold: float = 0.5,
    matcher: str = "greedy",
    category_strict: bool = True,
    pr_thresholds: Sequence[float] = PR_THRESHOLDS,
    count_predictions: Mapping[str, int] | None = None,
    threads: int = 1,
) -> MetricReport:
    if not gt_records:
        raise EmptyTally("nothing to evaluate")
    answers = align_predictions(gt_records, pred_records)
    thresholds = tuple(sorted(set(pr_thresholds)))

    def one(k):
        return _evaluate_one(gt_records[k], answers[k], iou_threshold, matcher, category_strict, thresholds)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(len(gt_records))))
    else:
        results = [one(k) for k in range(len(gt_records))]

    inst, img = Tally(), Tally()
    strata: dict[ScaleClass, Tally] = {}
    for r in results:
        inst += r.instance
        img += r.image
        for s, t in r.strata.items():
            strata[s] = strata.get(s, Tally()) + t
    acc_inst, f1_inst = instance_metrics(inst)
    acc_img = (img.tp + img.tn) / img.total
    f1_img = 2 * img.tp / (2 * img.tp + img.fp) if img.tp + img.fp else 0.0

    targeted = [r for r in results if r.has_targets]
    pr = {t: sum(r.perfect_at[t] for r in targeted) / len(targeted) for t in thresholds} if targeted else {}
    negatives = [r for r in results if not r.has_targets]
    nacc = sum(r.answered_empty for r in negatives) / len(negatives) if negatives else None
    by_scale = {s: instance_metrics(strata[s])[0] for s in ScaleClass if s in strata and strata[s].total}

    count_mae = count_acc = None
    if count_predictions is not None:
        ids = [r.expression_id for r in gt_records if r.expression_id in count_predictions]
        if len(ids) != len(gt_records):
            raise LengthMismatch(f"count predictions cover {len(ids)} of {len(gt_records)} expressions")
        count_mae, count_acc = count_metrics(
            [count_predictions[r.expression_id] for r in gt_records], [len(r.targets) for r in gt_records]
        )

    config = {
        "iou_threshold": iou_threshold,
        "matcher": matcher,
        "category_strict": category_strict,
        "f1_img_formula": "2TP/(2TP+FP)",
        "count_mae_basis": "bin_index",
        "scale_fp_attribution": "predicted_box",
        "expressions": len(gt_records),
    }
    return MetricReport(acc_inst, f1_inst, acc_img, f1_img, pr, nacc, by_scale, count_mae, count_acc, config)
