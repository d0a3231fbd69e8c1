"""Two-stage training of the count-aware decoder and evaluation through the metrics path."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import BoundingBox, DetectionInstance, PredictionRecord
from .errors import DivergenceDetected, InvalidConfig
from .metrics import MetricReport, evaluate
from .ngdino import NGDINO, LossWeights, bin_of, training_loss
from .synthbench import SyntheticScene, featurize, normalized_cxcywh, to_records
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    stage1_epochs: int = 15
    stage2_epochs: int = 3
    lr: float = 0.05
    stage1_lr: float | None = 1.0  # None falls back to lr
    batch_size: int = 16
    seed: int = 0
    teacher_forcing: bool = False
    clip_norm: float | None = None
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise InvalidConfig("epoch counts must be non-negative")
        if self.lr <= 0 or (self.stage1_lr is not None and self.stage1_lr <= 0) or self.batch_size < 1:
            raise InvalidConfig("lr must be positive and batch_size at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneTensors:
    """Featurized scenes stacked along a leading axis."""

    q_det: np.ndarray
    context: np.ndarray
    reference: np.ndarray
    gt_boxes: list  # per scene (n, 4) normalized cxcywh
    counts: np.ndarray

    def __len__(self):
        return len(self.counts)

    @classmethod
    def from_scenes(cls, scenes: Sequence[SyntheticScene], dim: int, num_queries: int) -> "SceneTensors":
        feats = [featurize(s, dim, num_queries) for s in scenes]
        gts = [
            np.array([normalized_cxcywh(s.objects[i].box, s.image_size) for i in s.target_indices]).reshape(-1, 4)
            for s in scenes
        ]
        return cls(
            np.stack([f.q_det for f in feats]),
            np.stack([f.context for f in feats]),
            np.stack([f.reference for f in feats]),
            gts,
            np.array([len(s.target_indices) for s in scenes], dtype=np.int64),
        )

    def batch(self, idx):
        return (self.q_det[idx], self.context[idx], self.reference[idx],
                [self.gt_boxes[i] for i in idx], self.counts[idx])


def head_parameter(name: str) -> bool:
    return ".number_head." in name


@dataclass
class TrainResult:
    log: list
    stage1_touched: list  # parameter names changed by stage 1


def _sgd_step(params: dict[str, Tensor], lr: float, clip_norm: float | None):
    grads = [t.grad for t in params.values() if t.grad is not None]
    factor = 1.0
    if clip_norm is not None and grads:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if norm > clip_norm:
            factor = clip_norm / norm
    for t in params.values():
        if t.grad is not None:
            t.data -= lr * factor * t.grad
            t.grad = None


def _run_epoch(model: NGDINO, data: SceneTensors, schedule: Schedule, trainable: dict[str, Tensor], epoch: int,
               lr: float):
    params = model.named_parameters()
    for name, t in params.items():
        t.requires_grad = name in trainable
        t.grad = None
    rng = np.random.default_rng([schedule.seed, epoch])
    order = rng.permutation(len(data))
    sums = dict(loss=0.0, l1=0.0, giou=0.0, cls=0.0, num=0.0)
    correct = 0
    for start in range(0, len(order), schedule.batch_size):
        idx = order[start:start + schedule.batch_size]
        q, ctx, ref, gts, counts = data.batch(idx)
        bins = np.array([bin_of(c) for c in counts])
        override = bins if schedule.teacher_forcing else None
        out = model(q, ctx, ref, count_override=override)
        if not (np.isfinite(out.boxes.data).all() and np.isfinite(out.logits.data).all()):
            raise DivergenceDetected(f"non-finite model output at epoch {epoch}")
        loss = training_loss(out, gts, counts, schedule.weights, model.config.count_loss_all_layers)
        value = loss.total.item()
        if not math.isfinite(value):
            raise DivergenceDetected(f"non-finite loss {value} at epoch {epoch}")
        if trainable:
            loss.total.backward()
            _sgd_step(trainable, lr, schedule.clip_norm)
        n = len(idx)
        sums["loss"] += value * n
        for k in ("l1", "giou", "cls", "num"):
            sums[k] += getattr(loss, k) * n
        if out.counts[-1] is not None:
            correct += int((out.counts[-1].pred == bins).sum())
    for t in params.values():
        t.requires_grad = True
    record = {k: v / len(data) for k, v in sums.items()}
    record["count_acc"] = correct / len(data) if model.config.use_number_head else None
    return record


def train(model: NGDINO, data: SceneTensors, schedule: Schedule, log_path=None) -> TrainResult:
    """Stage 1 updates only the number heads; stage 2 updates everything.

    Raises ``DivergenceDetected`` on a non-finite loss. Deterministic for a
    fixed model seed and ``schedule.seed``.
    """
    params = model.named_parameters()
    log = []
    before = {k: t.data.copy() for k, t in params.items()}
    head_only = {k: t for k, t in params.items() if head_parameter(k) and model.config.use_number_head}
    epoch = 0
    for _ in range(schedule.stage1_epochs):
        epoch += 1
        rec = _run_epoch(model, data, schedule, head_only, epoch, schedule.stage1_lr or schedule.lr)
        log.append({"epoch": epoch, "stage": 1, **rec})
        logger.info("epoch %d stage 1 loss %.4f", epoch, rec["loss"])
    touched = [k for k, t in params.items() if not np.array_equal(before[k], t.data, equal_nan=True)]
    outside = [k for k in touched if not head_parameter(k)]
    if outside:
        raise AssertionError(f"stage 1 changed frozen parameters: {outside}")
    trainable = model.used_parameters()
    for _ in range(schedule.stage2_epochs):
        epoch += 1
        rec = _run_epoch(model, data, schedule, trainable, epoch, schedule.lr)
        log.append({"epoch": epoch, "stage": 2, **rec})
        logger.info("epoch %d stage 2 loss %.4f", epoch, rec["loss"])
    if log_path is not None:
        write_log(log, log_path)
    return TrainResult(log, touched)


def write_log(log: list, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def predict(model: NGDINO, scenes: Sequence[SyntheticScene], data: SceneTensors,
            score_threshold: float = 0.5, batch_size: int = 128):
    """Prediction records (boxes whose objectness clears the threshold) and count bins."""
    records, bins = [], {}
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        q, ctx, ref, _, _ = data.batch(idx)
        out = model(q, ctx, ref)
        probs = 1.0 / (1.0 + np.exp(-out.logits.data))
        for row, k in enumerate(idx):
            scene = scenes[k]
            w, h = scene.image_size
            boxes = []
            for slot in np.flatnonzero(probs[row] > score_threshold):
                cx, cy, bw, bh = out.boxes.data[row, slot]
                box = BoundingBox((cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h)
                boxes.append(DetectionInstance(box, None, float(probs[row, slot])))
            records.append(PredictionRecord(scene.expression_id, tuple(boxes)))
            if out.counts[-1] is not None:
                bins[scene.expression_id] = int(out.counts[-1].pred[row])
    return records, (bins or None)


def evaluate_model(model: NGDINO, scenes: Sequence[SyntheticScene], data: SceneTensors | None = None,
                   score_threshold: float = 0.5, **eval_kw) -> MetricReport:
    if data is None:
        data = SceneTensors.from_scenes(scenes, model.config.dim, model.config.num_queries)
    preds, bins = predict(model, scenes, data, score_threshold)
    return evaluate(to_records(scenes), preds, count_predictions=bins, **eval_kw)
