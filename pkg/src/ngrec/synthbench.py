"""Seeded generator of desk-scale grounding problems with exactly known answers.

A scene is a set of attributed boxes plus one symbolic expression
(category, optional colour, optional image half). The generator plants the
wanted number of matching objects and distractors that each break at least
one constraint, then re-resolves the expression by brute force and refuses
to return a scene whose answer disagrees with the plan.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import (
    SMALL_AREA_MAX,
    LARGE_AREA_MIN,
    BoundingBox,
    DetectionInstance,
    ExpressionRecord,
    PredictionRecord,
    write_ground_truth,
    write_predictions,
)
from .errors import InvalidConfig, TooManyObjects
from .geometry import iou

CATEGORIES = ("car", "truck", "bus", "pedestrian")
COLORS = ("white", "black", "red", "blue")
REGIONS = ("left", "right", "top", "bottom")
_PLURAL = {"car": "cars", "truck": "trucks", "bus": "buses", "pedestrian": "pedestrians"}

OBJECT_FEATURES = 1 + len(CATEGORIES) + len(COLORS) + 4
EVIDENCE_FEATURES = 3
PREDICATE_FEATURES = len(CATEGORIES) + len(COLORS) + len(REGIONS)
MIN_SIDE = 4.0
MAX_LARGE_AREA = 30000.0


@dataclass(frozen=True)
class SynthConfig:
    n_scenes: int = 100
    seed: int = 0
    image_size: tuple[int, int] = (640, 640)
    min_objects: int = 4
    max_objects: int = 16
    max_targets: int = 8
    no_target_rate: float = 0.1
    scale_mix: tuple[float, float, float] = (0.31, 0.55, 0.14)
    zipf_exponent: float = 1.0
    color_rate: float = 0.5
    region_rate: float = 0.5
    hard_distractor_rate: float = 0.5
    evidence_noise: float = 0.0
    max_overlap: float = 0.3

    def __post_init__(self):
        if self.n_scenes < 1:
            raise InvalidConfig("n_scenes must be at least 1")
        for name in ("no_target_rate", "color_rate", "region_rate", "hard_distractor_rate", "max_overlap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1], got {v}")
        if len(self.scale_mix) != 3 or min(self.scale_mix) < 0 or not math.isclose(sum(self.scale_mix), 1.0):
            raise InvalidConfig(f"scale_mix must be three non-negative shares summing to 1, got {self.scale_mix}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise InvalidConfig("need 1 <= min_objects <= max_objects")
        if not 1 <= self.max_targets <= self.max_objects:
            raise InvalidConfig("need 1 <= max_targets <= max_objects")
        if self.image_size[0] < 200 or self.image_size[1] < 200:
            raise InvalidConfig("image_size must be at least 200x200 pixels")
        if self.evidence_noise < 0 or self.zipf_exponent < 0:
            raise InvalidConfig("evidence_noise and zipf_exponent must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Predicate:
    category: str | None = None
    color: str | None = None
    region: str | None = None

    def holds(self, obj: "SceneObject", image_size) -> bool:
        return (
            (self.category is None or obj.category == self.category)
            and (self.color is None or obj.color == self.color)
            and (self.region is None or in_region(obj.box, self.region, image_size))
        )

    def render(self) -> str:
        words = ["the"]
        if self.color:
            words.append(self.color)
        words.append(_PLURAL[self.category] if self.category else "objects")
        if self.region:
            words += ["in", "the", self.region, "half"]
        return " ".join(words)


@dataclass(frozen=True)
class SceneObject:
    box: BoundingBox
    category: str
    color: str
    # per-object perturbation of the evidence features, fixed at generation
    jitter: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SyntheticScene:
    seed: int
    index: int
    image_size: tuple[int, int]
    objects: tuple[SceneObject, ...]
    predicate: Predicate
    text: str
    target_indices: tuple[int, ...] = field(default=())

    @property
    def expression_id(self) -> str:
        return f"syn-{self.seed}-{self.index:06d}"

    @property
    def image_id(self) -> str:
        return f"img-{self.seed}-{self.index:06d}"


def in_region(box: BoundingBox, region: str, image_size) -> bool:
    cx, cy = box.x + box.w / 2, box.y + box.h / 2
    w, h = image_size
    return {"left": cx < w / 2, "right": cx > w / 2, "top": cy < h / 2, "bottom": cy > h / 2}[region]


def resolve_targets(objects: Sequence[SceneObject], predicate: Predicate, image_size) -> tuple[int, ...]:
    return tuple(i for i, o in enumerate(objects) if predicate.holds(o, image_size))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _target_count_probs(cfg: SynthConfig) -> np.ndarray:
    k = np.arange(1, cfg.max_targets + 1, dtype=np.float64)
    p = k ** -cfg.zipf_exponent
    return p / p.sum()


def _sample_size(rng, cfg: SynthConfig) -> tuple[float, float]:
    cls = rng.choice(3, p=cfg.scale_mix)
    lo, hi = [(MIN_SIDE ** 2 * 4, SMALL_AREA_MAX), (SMALL_AREA_MAX, LARGE_AREA_MIN), (LARGE_AREA_MIN, MAX_LARGE_AREA)][cls]
    while True:
        area = rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        w = math.sqrt(area * aspect)
        h = area / w
        a = w * h
        # keep the realized area inside the sampled stratum despite rounding
        ok = (a < SMALL_AREA_MAX, SMALL_AREA_MAX <= a <= LARGE_AREA_MIN, a > LARGE_AREA_MIN)[cls]
        if ok and w >= MIN_SIDE and h >= MIN_SIDE:
            return w, h


def _sample_position(rng, w, h, image_size, region: str | None, inside: bool):
    width, height = image_size
    margin = 2.0
    x_lo, x_hi = w / 2, width - w / 2
    y_lo, y_hi = h / 2, height - h / 2
    if region is not None:
        # restrict the centre to the wanted side of the midline, away from it
        want_low = (region in ("left", "top")) == inside
        if region in ("left", "right"):
            x_lo, x_hi = (x_lo, width / 2 - margin) if want_low else (width / 2 + margin, x_hi)
        else:
            y_lo, y_hi = (y_lo, height / 2 - margin) if want_low else (height / 2 + margin, y_hi)
    if x_lo > x_hi or y_lo > y_hi:
        return None
    cx, cy = rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)
    if region is None and (abs(cx - width / 2) < margin or abs(cy - height / 2) < margin):
        return None
    return BoundingBox(cx - w / 2, cy - h / 2, w, h)


def _distractor_plan(rng, pred: Predicate, cfg: SynthConfig):
    """Attributes plus region requirement for one object that must not match."""
    other = [c for c in CATEGORIES if c != pred.category]
    breakable = ["category"]
    if pred.color:
        breakable.append("color")
    if pred.region:
        breakable.append("region")
    hard = len(breakable) > 1 and rng.random() < cfg.hard_distractor_rate
    broken = breakable[1 + rng.integers(len(breakable) - 1)] if hard else "category"
    category = pred.category if hard else other[rng.integers(len(other))]
    if broken == "color":
        color = [c for c in COLORS if c != pred.color][rng.integers(len(COLORS) - 1)]
    else:
        color = COLORS[rng.integers(len(COLORS))]
    # the region constraint is violated only when it is the broken one; otherwise free
    region_inside = False if broken == "region" else None
    return category, color, region_inside


def _place(rng, cfg, placed, category, region, inside):
    for _ in range(200):
        w, h = _sample_size(rng, cfg)
        box = _sample_position(rng, w, h, cfg.image_size, region, inside)
        if box is None:
            continue
        if all(o.category != category or iou(o.box, box) <= cfg.max_overlap for o in placed):
            return box
    raise RuntimeError("could not place a non-overlapping object; image too crowded")


def generate_scene(cfg: SynthConfig, index: int, n_targets: int) -> SyntheticScene:
    rng = np.random.default_rng([cfg.seed, index])
    n_objects = int(rng.integers(max(cfg.min_objects, n_targets, 1), cfg.max_objects + 1))
    pred = Predicate(
        category=CATEGORIES[rng.integers(len(CATEGORIES))],
        color=COLORS[rng.integers(len(COLORS))] if rng.random() < cfg.color_rate else None,
        region=REGIONS[rng.integers(len(REGIONS))] if rng.random() < cfg.region_rate else None,
    )
    objects: list[SceneObject] = []
    planned = []
    for k in range(n_objects):
        is_target = k < n_targets
        if is_target:
            category = pred.category
            color = pred.color or COLORS[rng.integers(len(COLORS))]
            region, inside = pred.region, True
        else:
            category, color, region_inside = _distractor_plan(rng, pred, cfg)
            region, inside = (pred.region, False) if region_inside is False else (None, True)
        box = _place(rng, cfg, objects, category, region, inside)
        jitter = tuple(float(v) for v in rng.normal(0.0, cfg.evidence_noise, size=3)) if cfg.evidence_noise else (0.0, 0.0, 0.0)
        objects.append(SceneObject(box, category, color, jitter))
        planned.append(is_target)
    order = rng.permutation(n_objects)
    objects = [objects[i] for i in order]
    planned = [planned[i] for i in order]
    targets = resolve_targets(objects, pred, cfg.image_size)
    if targets != tuple(i for i, t in enumerate(planned) if t):
        raise AssertionError(f"scene {index}: resolved targets disagree with the generation plan")
    return SyntheticScene(cfg.seed, index, cfg.image_size, tuple(objects), pred, pred.render(), targets)


def generate(cfg: SynthConfig) -> list[SyntheticScene]:
    """Deterministic list of ``cfg.n_scenes`` scenes.

    Exactly ``round(no_target_rate * n_scenes)`` scenes have no target; the
    rest draw their target count from a power law over 1..max_targets.
    """
    rng = np.random.default_rng(cfg.seed)
    n_empty = int(round(cfg.no_target_rate * cfg.n_scenes))
    empty = np.zeros(cfg.n_scenes, dtype=bool)
    empty[rng.permutation(cfg.n_scenes)[:n_empty]] = True
    counts = rng.choice(np.arange(1, cfg.max_targets + 1), size=cfg.n_scenes, p=_target_count_probs(cfg))
    counts[empty] = 0
    return [generate_scene(cfg, i, int(counts[i])) for i in range(cfg.n_scenes)]


# ---------------------------------------------------------------------------
# featurization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneFeatures:
    q_det: np.ndarray  # (L_d, D)
    context: np.ndarray  # (L_d, D)
    reference: np.ndarray  # (L_d, 4) normalized cxcywh
    object_count: int


def predicate_indicator(pred: Predicate) -> np.ndarray:
    v = np.zeros(PREDICATE_FEATURES)
    if pred.category is not None:
        v[CATEGORIES.index(pred.category)] = 1.0
    if pred.color is not None:
        v[len(CATEGORIES) + COLORS.index(pred.color)] = 1.0
    if pred.region is not None:
        v[len(CATEGORIES) + len(COLORS) + REGIONS.index(pred.region)] = 1.0
    return v


def normalized_cxcywh(box: BoundingBox, image_size) -> np.ndarray:
    w, h = image_size
    return np.array([(box.x + box.w / 2) / w, (box.y + box.h / 2) / h, box.w / w, box.h / h])


def object_features(obj: SceneObject, image_size) -> np.ndarray:
    v = np.zeros(OBJECT_FEATURES)
    v[0] = 1.0
    v[1 + CATEGORIES.index(obj.category)] = 1.0
    v[1 + len(CATEGORIES) + COLORS.index(obj.color)] = 1.0
    v[1 + len(CATEGORIES) + len(COLORS):] = normalized_cxcywh(obj.box, image_size)
    return v


def evidence_features(obj: SceneObject, pred: Predicate, image_size) -> np.ndarray:
    """Per-constraint agreement between one object and the expression (1 = satisfied)."""
    agree = np.array([
        1.0 if pred.category is None or obj.category == pred.category else 0.0,
        1.0 if pred.color is None or obj.color == pred.color else 0.0,
        1.0 if pred.region is None or in_region(obj.box, pred.region, image_size) else 0.0,
    ])
    return agree + np.asarray(obj.jitter)


def featurize(scene: SyntheticScene, dim: int = 32, num_queries: int = 16) -> SceneFeatures:
    """Fixed embeddings standing in for the image/text encoders.

    Query rows: object attributes, geometry and per-constraint agreement.
    Context rows: object attributes and geometry plus the expression
    indicator, which every row (padding included) carries.
    """
    n = len(scene.objects)
    if n > num_queries:
        raise TooManyObjects(f"scene has {n} objects but only {num_queries} query slots", scene.expression_id)
    need = max(OBJECT_FEATURES + EVIDENCE_FEATURES, OBJECT_FEATURES + PREDICATE_FEATURES)
    if dim < need:
        raise InvalidConfig(f"feature dimension {dim} is below the {need} columns the layout needs")
    q = np.zeros((num_queries, dim))
    ctx = np.zeros((num_queries, dim))
    ref = np.full((num_queries, 4), 0.5)
    ind = predicate_indicator(scene.predicate)
    ctx[:, OBJECT_FEATURES:OBJECT_FEATURES + PREDICATE_FEATURES] = ind
    for i, obj in enumerate(scene.objects):
        f = object_features(obj, scene.image_size)
        q[i, :OBJECT_FEATURES] = f
        q[i, OBJECT_FEATURES:OBJECT_FEATURES + EVIDENCE_FEATURES] = evidence_features(obj, scene.predicate, scene.image_size)
        ctx[i, :OBJECT_FEATURES] = f
        ref[i] = normalized_cxcywh(obj.box, scene.image_size)
    return SceneFeatures(q, ctx, ref, n)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def to_records(scenes: Sequence[SyntheticScene]) -> list[ExpressionRecord]:
    return [
        ExpressionRecord(
            s.expression_id,
            s.image_id,
            tuple(s.image_size),
            s.text,
            tuple(DetectionInstance(s.objects[i].box, s.objects[i].category, 1.0) for i in s.target_indices),
        )
        for s in scenes
    ]


def answer_key(scenes: Sequence[SyntheticScene]) -> list[PredictionRecord]:
    return [
        PredictionRecord(
            s.expression_id,
            tuple(DetectionInstance(s.objects[i].box, s.objects[i].category, 1.0) for i in s.target_indices),
        )
        for s in scenes
    ]


def export_as_benchmark(scenes: Sequence[SyntheticScene], gt_path, key_path) -> None:
    write_ground_truth(to_records(scenes), gt_path)
    write_predictions(answer_key(scenes), key_path)


def declared_totals(scenes: Sequence[SyntheticScene]) -> dict:
    """The generator's own bookkeeping, independent of the export path."""
    counts = [len(s.target_indices) for s in scenes]
    return {
        "expression_count": len(scenes),
        "instance_count": sum(counts),
        "no_target_count": sum(1 for c in counts if c == 0),
        "count_histogram": {c: counts.count(c) for c in sorted(set(counts))},
    }
