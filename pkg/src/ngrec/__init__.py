"""Grounding metrics, a count-aware detection decoder and a synthetic benchmark."""

from .domain import (
    BoundingBox,
    DetectionInstance,
    ExpressionRecord,
    PredictionRecord,
    ScaleClass,
    compute_stats,
    parse_ground_truth,
    parse_predictions,
)
from .geometry import giou, iou
from .matching import match
from .metrics import MetricReport, evaluate
from .ngdino import NGDINO, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "DetectionInstance", "ExpressionRecord", "PredictionRecord", "ScaleClass",
    "compute_stats", "parse_ground_truth", "parse_predictions", "giou", "iou", "match",
    "MetricReport", "evaluate", "NGDINO", "ModelConfig",
]
