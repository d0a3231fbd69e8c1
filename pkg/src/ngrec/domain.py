"""Domain types, strict ingestion of annotation/prediction files, dataset statistics."""

from __future__ import annotations

import enum
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import (
    EmptyDataset,
    InvariantViolation,
    IoFailure,
    MalformedDocument,
    SchemaViolation,
)

logger = logging.getLogger(__name__)

SMALL_AREA_MAX = 32 * 32  # areas strictly below are small
LARGE_AREA_MIN = 96 * 96  # areas strictly above are large


class ScaleClass(str, enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"

    @classmethod
    def of_area(cls, area: float) -> "ScaleClass":
        if area < SMALL_AREA_MAX:
            return cls.SMALL
        if area > LARGE_AREA_MIN:
            return cls.LARGE
        return cls.MEDIUM


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in absolute pixels, top-left corner plus size."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvariantViolation(f"box {name} must be finite, got {v}")
        if not (self.w > 0 and self.h > 0):
            raise InvariantViolation(f"box needs positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2) -> "BoundingBox":
        return cls(x1, y1, x2 - x1, y2 - y1)

    @classmethod
    def from_normalized_cxcywh(cls, cx, cy, w, h, image_size) -> "BoundingBox":
        width, height = image_size
        pw, ph = w * width, h * height
        return cls(cx * width - pw / 2, cy * height - ph / 2, pw, ph)

    def area(self) -> float:
        return self.w * self.h

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def scale_class(self) -> ScaleClass:
        return ScaleClass.of_area(self.area())

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class DetectionInstance:
    box: BoundingBox
    category: str | None = None
    score: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InvariantViolation(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ExpressionRecord:
    expression_id: str
    image_id: str
    image_size: tuple[int, int]
    text: str
    targets: tuple[DetectionInstance, ...] = ()

    @property
    def is_no_target(self) -> bool:
        return len(self.targets) == 0

    def word_count(self) -> int:
        return len(self.text.split())


@dataclass(frozen=True)
class PredictionRecord:
    expression_id: str
    boxes: tuple[DetectionInstance, ...] = ()


@dataclass(frozen=True)
class DatasetStats:
    expression_count: int
    image_count: int
    instance_count: int
    avg_targets_per_expression: float
    avg_words_per_expression: float
    scale_histogram: dict[ScaleClass, int] = field(default_factory=dict)
    count_histogram: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "expression_count": self.expression_count,
            "image_count": self.image_count,
            "instance_count": self.instance_count,
            "avg_targets_per_expression": self.avg_targets_per_expression,
            "avg_words_per_expression": self.avg_words_per_expression,
            "scale_histogram": {s.value: self.scale_histogram.get(s, 0) for s in ScaleClass},
            "count_histogram": {str(k): v for k, v in sorted(self.count_histogram.items())},
        }


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------

_GT_TOP = {"images", "expressions"}
_GT_IMAGE = {"id", "width", "height"}
_GT_EXPR = {"id", "image_id", "text", "targets"}
_GT_TARGET = {"bbox", "category"}
_PRED_LINE = {"expression_id", "boxes"}
_PRED_BOX = {"bbox", "score", "category"}

BOX_FORMATS = ("xywh", "cxcywh_norm")


class _Checker:
    """Field-level validation shared by both file formats."""

    def __init__(self, strict: bool):
        self.strict = strict

    def keys(self, obj, required, allowed, where):
        if not isinstance(obj, dict):
            raise SchemaViolation(f"expected an object, got {type(obj).__name__}", where)
        missing = [k for k in sorted(required) if k not in obj]
        if missing:
            raise SchemaViolation(f"missing field(s) {missing}", where)
        extra = sorted(set(obj) - set(allowed))
        if extra:
            if self.strict:
                raise SchemaViolation(f"unknown field(s) {extra}", where)
            logger.warning("ignoring unknown field(s) %s at %s", extra, where)

    @staticmethod
    def number(v, name, where) -> float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaViolation(f"{name} must be a number, got {v!r}", where)
        v = float(v)
        if not math.isfinite(v):
            raise SchemaViolation(f"{name} must be finite", where)
        return v

    @staticmethod
    def string(v, name, where) -> str:
        if not isinstance(v, str):
            raise SchemaViolation(f"{name} must be a string, got {v!r}", where)
        return v

    @staticmethod
    def id_like(v, name, where) -> str:
        # integer ids are common in COCO-style files; they are normalized to strings
        if isinstance(v, bool) or not isinstance(v, (str, int)):
            raise SchemaViolation(f"{name} must be a string or integer, got {v!r}", where)
        return str(v)

    def bbox(self, v, where, box_format, image_size) -> BoundingBox:
        if not isinstance(v, list) or len(v) != 4:
            raise SchemaViolation(f"bbox must be a list of 4 numbers, got {v!r}", where)
        vals = [self.number(c, "bbox", where) for c in v]
        try:
            if box_format == "xywh":
                return BoundingBox(*vals)
            return BoundingBox.from_normalized_cxcywh(*vals, image_size=image_size)
        except InvariantViolation as exc:
            raise InvariantViolation(str(exc), where) from None


def _load_json(text: str, where: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"invalid JSON: {exc.msg}", f"{where} byte offset {exc.pos}") from None


def _read_text(path) -> str:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedDocument("file is not UTF-8", f"byte offset {exc.start}") from None


def ground_truth_from_document(
    doc, *, strict: bool = True, box_format: str = "xywh"
) -> list[ExpressionRecord]:
    if box_format not in BOX_FORMATS:
        raise ValueError(f"box_format must be one of {BOX_FORMATS}")
    chk = _Checker(strict)
    chk.keys(doc, _GT_TOP, _GT_TOP, "document")
    if not isinstance(doc["images"], list) or not isinstance(doc["expressions"], list):
        raise SchemaViolation("images and expressions must be lists", "document")

    images: dict[str, tuple[int, int]] = {}
    for i, img in enumerate(doc["images"]):
        where = f"images[{i}]"
        chk.keys(img, _GT_IMAGE, _GT_IMAGE, where)
        image_id = chk.id_like(img["id"], "id", where)
        width = chk.number(img["width"], "width", where)
        height = chk.number(img["height"], "height", where)
        if width <= 0 or height <= 0 or width != int(width) or height != int(height):
            raise InvariantViolation("image size must be positive integers", f"image {image_id}")
        if image_id in images:
            raise InvariantViolation(f"duplicate image id {image_id!r}", f"image {image_id}")
        images[image_id] = (int(width), int(height))

    records: list[ExpressionRecord] = []
    seen: set[str] = set()
    for i, expr in enumerate(doc["expressions"]):
        where = f"expressions[{i}]"
        if isinstance(expr, dict) and "id" in expr:
            where = f"expression {expr['id']}"
        chk.keys(expr, _GT_EXPR, _GT_EXPR, where)
        expr_id = chk.id_like(expr["id"], "id", where)
        image_id = chk.id_like(expr["image_id"], "image_id", where)
        text = chk.string(expr["text"], "text", where)
        if expr_id in seen:
            raise InvariantViolation(f"duplicate expression id {expr_id!r}", expr_id)
        seen.add(expr_id)
        if image_id not in images:
            raise InvariantViolation(f"unknown image id {image_id!r}", expr_id)
        size = images[image_id]
        if not isinstance(expr["targets"], list):
            raise SchemaViolation("targets must be a list", expr_id)
        targets = []
        for j, tgt in enumerate(expr["targets"]):
            twhere = f"expression {expr_id} target {j}"
            chk.keys(tgt, _GT_TARGET, _GT_TARGET, twhere)
            box = chk.bbox(tgt["bbox"], twhere, box_format, size)
            category = chk.string(tgt["category"], "category", twhere)
            x1, y1, x2, y2 = box.xyxy()
            if x1 < 0 or y1 < 0 or x2 > size[0] or y2 > size[1]:
                raise InvariantViolation(f"box {box.as_list()} outside image {size}", twhere)
            targets.append(DetectionInstance(box, category, 1.0))
        records.append(ExpressionRecord(expr_id, image_id, size, text, tuple(targets)))
    return records


def parse_ground_truth(path, *, strict: bool = True, box_format: str = "xywh") -> list[ExpressionRecord]:
    """Read and validate a ground-truth annotation document.

    ``box_format="cxcywh_norm"`` accepts normalized centre boxes and converts
    them to pixels through the owning image's size.
    """
    doc = _load_json(_read_text(path), str(path))
    return ground_truth_from_document(doc, strict=strict, box_format=box_format)


def parse_predictions(path, *, strict: bool = True) -> list[PredictionRecord]:
    """Read newline-delimited prediction records in file order."""
    text = _read_text(path)
    chk = _Checker(strict)
    records = []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), start=1):
        start = offset
        offset += len(line.encode("utf-8"))
        if not line.strip():
            continue
        where = f"line {lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"invalid JSON: {exc.msg}", f"{where} byte offset {start + exc.pos}") from None
        chk.keys(obj, _PRED_LINE, _PRED_LINE, where)
        expr_id = chk.id_like(obj["expression_id"], "expression_id", where)
        where = f"{where} (expression {expr_id})"
        if not isinstance(obj["boxes"], list):
            raise SchemaViolation("boxes must be a list", where)
        boxes = []
        for j, b in enumerate(obj["boxes"]):
            bwhere = f"{where} box {j}"
            chk.keys(b, {"bbox", "score"}, _PRED_BOX, bwhere)
            box = chk.bbox(b["bbox"], bwhere, "xywh", None)
            score = chk.number(b["score"], "score", bwhere)
            if not 0.0 <= score <= 1.0:
                raise SchemaViolation(f"score must lie in [0, 1], got {score}", bwhere)
            category = b.get("category")
            if category is not None:
                category = chk.string(category, "category", bwhere)
            boxes.append(DetectionInstance(box, category, score))
        records.append(PredictionRecord(expr_id, tuple(boxes)))
    return records


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def ground_truth_to_document(records: Sequence[ExpressionRecord]) -> dict:
    images: dict[str, tuple[int, int]] = {}
    for r in records:
        prev = images.setdefault(r.image_id, r.image_size)
        if prev != r.image_size:
            raise InvariantViolation(f"image {r.image_id!r} has conflicting sizes", r.expression_id)
    return {
        "images": [{"id": k, "width": w, "height": h} for k, (w, h) in images.items()],
        "expressions": [
            {
                "id": r.expression_id,
                "image_id": r.image_id,
                "text": r.text,
                "targets": [{"bbox": t.box.as_list(), "category": t.category} for t in r.targets],
            }
            for r in records
        ],
    }


def _box_entry(d: DetectionInstance) -> dict:
    entry = {"bbox": d.box.as_list(), "score": d.score}
    if d.category is not None:
        entry["category"] = d.category
    return entry


def dumps_json(obj) -> str:
    """Canonical JSON text used for every file this package writes."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=1) + "\n"


def write_ground_truth(records: Sequence[ExpressionRecord], path) -> None:
    _write(path, dumps_json(ground_truth_to_document(records)))


def write_predictions(records: Iterable[PredictionRecord], path) -> None:
    lines = [
        json.dumps({"expression_id": r.expression_id, "boxes": [_box_entry(b) for b in r.boxes]},
                   sort_keys=True, ensure_ascii=False)
        for r in records
    ]
    _write(path, "".join(line + "\n" for line in lines))


def _write(path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def compute_stats(records: Sequence[ExpressionRecord]) -> DatasetStats:
    if not records:
        raise EmptyDataset("cannot compute statistics of an empty dataset")
    scale_hist: Counter = Counter()
    count_hist: Counter = Counter()
    words = 0
    for r in records:
        count_hist[len(r.targets)] += 1
        words += r.word_count()
        for t in r.targets:
            scale_hist[t.box.scale_class()] += 1
    n = len(records)
    instances = sum(scale_hist.values())
    return DatasetStats(
        expression_count=n,
        image_count=len({r.image_id for r in records}),
        instance_count=instances,
        avg_targets_per_expression=instances / n,
        avg_words_per_expression=words / n,
        scale_histogram={s: scale_hist.get(s, 0) for s in ScaleClass},
        count_histogram=dict(sorted(count_hist.items())),
    )
