"""Count-aware grounding decoder.

A detection decoder layer extended with three pieces: a head that classifies
the number of referred targets into five bins, a learnable bank of number
queries from which the predicted bin selects one contiguous slice, and a
cross-attention branch, parallel to self-attention, in which detection
queries attend to that slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import BinOutOfRange, InvalidConfig, ShapeMismatch
from .tensor import Tensor

NUM_BINS = 5
ABLATIONS = ("none", "no-head", "no-xattn", "neither")


def bin_of(n: int) -> int:
    """Count bin index: counts 0..3 map to themselves, anything larger to 4."""
    if n < 0:
        raise ValueError(f"target count must be non-negative, got {n}")
    return min(int(n), NUM_BINS - 1)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    num_queries: int = 16
    per_bin_length: int = 10
    head_hidden: int | None = None  # defaults to dim
    ffn_hidden: int = 64
    heads: int = 1
    number_heads: int = 1
    depth: int = 1
    use_number_head: bool = True
    use_number_attention: bool = True
    count_loss_all_layers: bool = False
    box_delta_scale: float = 0.01
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("dim", "num_queries", "per_bin_length", "ffn_hidden", "heads", "number_heads", "depth"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.dim % self.heads or self.dim % self.number_heads:
            raise InvalidConfig("dim must divide evenly into attention heads")

    @property
    def bank_length(self) -> int:
        return NUM_BINS * self.per_bin_length

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.dim

    @classmethod
    def for_ablation(cls, ablation: str, **kw) -> "ModelConfig":
        if ablation not in ABLATIONS:
            raise InvalidConfig(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
        return cls(
            use_number_head=ablation in ("none", "no-xattn"),
            use_number_attention=ablation in ("none", "no-head"),
            **kw,
        )


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class _Params:
    """Mixin yielding (dotted name, Tensor) pairs over nested dataclass fields."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            v = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(v, Tensor):
                yield name, v
            elif is_dataclass(v):
                yield from v.named_parameters(name + ".")
            elif isinstance(v, list):
                for i, item in enumerate(v):
                    yield from item.named_parameters(f"{name}.{i}.")


@dataclass
class AttentionParams(_Params):
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor | None = None


@dataclass
class NumberHeadParams(_Params):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class NumberQueryBank(_Params):
    table: Tensor
    per_bin_length: int = field(default=10)

    def __post_init__(self):
        if self.table.shape[0] != NUM_BINS * self.per_bin_length:
            raise ShapeMismatch("NumberQueryBank", self.table.shape, (NUM_BINS * self.per_bin_length,))

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}table", self.table


@dataclass
class LayerNormParams(_Params):
    gain: Tensor
    bias: Tensor


@dataclass
class FFNParams(_Params):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class DecoderLayerParams(_Params):
    self_attn: AttentionParams
    number_attn: AttentionParams
    context_attn: AttentionParams
    ffn: FFNParams
    norm1: LayerNormParams
    norm2: LayerNormParams
    norm3: LayerNormParams
    number_head: NumberHeadParams
    number_queries: NumberQueryBank


@dataclass
class LinearParams(_Params):
    w: Tensor
    b: Tensor


@dataclass
class ModelParams(_Params):
    layers: list
    box_head: LinearParams
    objectness_head: LinearParams


class _Init:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def uniform(self, fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def linear(self, d_in, d_out):
        return self.uniform(d_in, (d_in, d_out)), self.uniform(d_in, (d_out,))

    def attention(self, d, out_bias=True):
        wq, bq = self.linear(d, d)
        wk, bk = self.linear(d, d)
        wv, bv = self.linear(d, d)
        wo, bo = self.linear(d, d)
        return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo if out_bias else None)

    def norm(self, d):
        return LayerNormParams(Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in scaled uniform initialization, drawn in a fixed order.

    Every parameter group is created regardless of which number components
    are enabled, so ablated and full models built from one seed share all
    common weights.
    """
    init = _Init(np.random.default_rng(seed))
    d = config.dim
    layers = []
    for _ in range(config.depth):
        self_attn = init.attention(d)
        # no output bias: a zeroed value projection then silences the branch exactly
        number_attn = init.attention(d, out_bias=False)
        number_attn.wo.data[:] = 0.0  # branch starts silent, learns its way in
        context_attn = init.attention(d)
        ffn = FFNParams(*init.linear(d, config.ffn_hidden), *init.linear(config.ffn_hidden, d))
        norms = [init.norm(d) for _ in range(3)]
        head = NumberHeadParams(*init.linear(d, config.hidden), *init.linear(config.hidden, NUM_BINS))
        table = Tensor(init.rng.standard_normal((config.bank_length, d)), requires_grad=True)
        bank = NumberQueryBank(table, config.per_bin_length)
        layers.append(DecoderLayerParams(self_attn, number_attn, context_attn, ffn, *norms, head, bank))
    # box deltas start at zero so initial boxes sit on their reference boxes
    box_head = LinearParams(Tensor(np.zeros((d, 4)), requires_grad=True), Tensor(np.zeros(4), requires_grad=True))
    objectness_head = LinearParams(*init.linear(d, 1))
    return ModelParams(layers, box_head, objectness_head)


# ---------------------------------------------------------------------------
# number components
# ---------------------------------------------------------------------------


class CountPrediction(NamedTuple):
    prob: Tensor  # (B, 5)
    pred: np.ndarray  # (B,) ints
    logits: Tensor  # (B, 5)


def predict_count(q_det: Tensor, head: NumberHeadParams) -> CountPrediction:
    """Per-query FFN, mean over the query axis, softmax over the five bins."""
    if q_det.ndim != 3 or q_det.shape[-1] != head.w1.shape[0]:
        raise ShapeMismatch("predict_count", q_det.shape, head.w1.shape)
    h = T.relu(T.linear(q_det, head.w1, head.b1))
    logits = T.mean_pool(T.linear(h, head.w2, head.b2), axis=1)
    prob = T.softmax(logits, axis=-1)
    return CountPrediction(prob, T.argmax(prob, axis=-1), logits)


def select_number_queries(bank: NumberQueryBank, n_pred) -> Tensor:
    """Slice ``[L_s * n, L_s * (n + 1))`` of the bank.

    A scalar index returns an (L_s, D) slice; a sequence of per-item indices
    returns a (B, L_s, D) stack.
    """
    idx = np.asarray(n_pred)
    if np.any(idx < 0) or np.any(idx >= NUM_BINS) or idx.dtype.kind not in "iu":
        raise BinOutOfRange(f"count bin must be an integer in [0, {NUM_BINS - 1}], got {n_pred!r}")
    ls = bank.per_bin_length
    if idx.ndim == 0:
        return T.slice_rows(bank.table, ls * int(idx), ls * (int(idx) + 1))
    return T.gather_slices(bank.table, idx * ls, ls)


def attention(q_in: Tensor, kv_in: Tensor, p: AttentionParams, heads: int = 1) -> Tensor:
    q = T.linear(q_in, p.wq, p.bq)
    k = T.linear(kv_in, p.wk, p.bk)
    v = T.linear(kv_in, p.wv, p.bv)
    return T.linear(T.scaled_dot_attention(q, k, v, heads), p.wo, p.bo)


def number_cross_attention(q_det: Tensor, q_num_sel: Tensor, params: AttentionParams, heads: int = 1) -> Tensor:
    """Detection queries attend to the selected number queries (keys and values)."""
    if q_num_sel.shape[-1] != q_det.shape[-1]:
        raise ShapeMismatch("number_cross_attention", q_det.shape, q_num_sel.shape)
    return attention(q_det, q_num_sel, params, heads)


class LayerOutput(NamedTuple):
    q_det: Tensor
    count: CountPrediction | None
    selected: np.ndarray | None  # bank slice used per batch item


def decoder_layer_forward(
    q_det: Tensor,
    context: Tensor,
    params: DecoderLayerParams,
    config: ModelConfig,
    count_override: Sequence[int] | int | None = None,
) -> LayerOutput:
    """One decoder layer.

    ``LN(q + SA(q) + NCA(q, sel))`` then ``LN(x + CA(x, context))`` then
    ``LN(x + FFN(x))``. The selected slice comes from ``count_override``
    when given, otherwise from the layer's own count prediction. With the
    number head disabled the number branch attends to the whole bank.
    """
    if q_det.ndim != 3 or q_det.shape[-1] != config.dim:
        raise ShapeMismatch("decoder_layer_forward", q_det.shape, (config.dim,))
    if context.ndim != 3 or context.shape[0] != q_det.shape[0] or context.shape[-1] != config.dim:
        raise ShapeMismatch("decoder_layer_forward", q_det.shape, context.shape)
    b = q_det.shape[0]
    count = predict_count(q_det, params.number_head) if config.use_number_head else None
    mixed = attention(q_det, q_det, params.self_attn, config.heads)
    selected = None
    if config.use_number_attention:
        if count_override is not None:
            selected = np.broadcast_to(np.asarray(count_override), (b,)).copy()
            if np.any(selected < 0) or np.any(selected >= NUM_BINS):
                raise BinOutOfRange(f"count override out of range: {count_override!r}")
        elif count is not None:
            selected = count.pred
        if selected is not None:
            sel = select_number_queries(params.number_queries, selected)
        else:
            sel = T.expand(params.number_queries.table, b)
        mixed = mixed + number_cross_attention(q_det, sel, params.number_attn, config.number_heads)
    x = T.layer_norm(q_det + mixed, params.norm1.gain, params.norm1.bias, config.ln_eps)
    x = T.layer_norm(x + attention(x, context, params.context_attn, config.heads),
                     params.norm2.gain, params.norm2.bias, config.ln_eps)
    ffn = params.ffn
    h = T.linear(T.relu(T.linear(x, ffn.w1, ffn.b1)), ffn.w2, ffn.b2)
    x = T.layer_norm(x + h, params.norm3.gain, params.norm3.bias, config.ln_eps)
    return LayerOutput(x, count, selected)


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p) - np.log1p(-p)


def detection_heads(q: Tensor, box_head: LinearParams, objectness_head: LinearParams, reference=None,
                    delta_scale: float = 1.0):
    """Boxes in normalized (cx, cy, w, h) and one objectness logit per query.

    Box deltas, multiplied by ``delta_scale``, are added in logit space to
    optional reference boxes (zeros, i.e. 0.5 after the logistic map, when
    none are given).
    """
    delta = T.linear(q, box_head.w, box_head.b)
    if delta_scale != 1.0:
        delta = T.scale(delta, delta_scale)
    if reference is not None:
        ref = np.asarray(reference, dtype=np.float64)
        if ref.shape != delta.shape:
            raise ShapeMismatch("detection_heads", delta.shape, ref.shape)
        delta = delta + Tensor(_logit(ref))
    boxes = T.sigmoid(delta)
    logits = T.reshape(T.linear(q, objectness_head.w, objectness_head.b), q.shape[:-1])
    return boxes, logits


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


class ModelOutput(NamedTuple):
    boxes: Tensor  # (B, L_d, 4)
    logits: Tensor  # (B, L_d)
    counts: list  # CountPrediction per layer, or None where the head is disabled
    selected: list


class NGDINO:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, params: ModelParams | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params.named_parameters())

    def used_parameters(self) -> dict[str, Tensor]:
        """Parameters that can influence outputs or losses under this configuration."""
        out = {}
        for name, t in self.named_parameters().items():
            if ".number_head." in name and not self.config.use_number_head:
                continue
            if (".number_attn." in name or ".number_queries." in name) and not self.config.use_number_attention:
                continue
            out[name] = t
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.named_parameters()
        if set(arrays) != set(params):
            raise ShapeMismatch("load_arrays", (len(arrays),), (len(params),))
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise ShapeMismatch(f"load_arrays[{name}]", arrays[name].shape, t.shape)
            t.data = np.array(arrays[name], dtype=np.float64)

    def forward(self, q_det, context, reference=None, count_override=None) -> ModelOutput:
        q = T.as_tensor(q_det)
        ctx = T.as_tensor(context)
        counts, selected = [], []
        for layer in self.params.layers:
            out = decoder_layer_forward(q, ctx, layer, self.config, count_override)
            q = out.q_det
            counts.append(out.count)
            selected.append(out.selected)
        boxes, logits = detection_heads(q, self.params.box_head, self.params.objectness_head, reference,
                                        self.config.box_delta_scale)
        return ModelOutput(boxes, logits, counts, selected)

    __call__ = forward


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    cls: float = 1.0
    num: float = 1.0


class LossBreakdown(NamedTuple):
    total: Tensor
    l1: float
    giou: float
    cls: float
    num: float
    assignments: list


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU between every row of ``a`` (N,4) and ``b`` (M,4), both normalized cxcywh."""
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    enc = (erb[..., 0] - elt[..., 0]) * (erb[..., 1] - elt[..., 1])
    return inter / union - (enc - union) / enc


def hungarian_assignment(boxes: np.ndarray, probs: np.ndarray, gt: np.ndarray, weights: LossWeights):
    """Minimum-cost slot/GT assignment for one batch item; returns (slot idx, gt idx)."""
    if len(gt) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    cost = (
        weights.l1 * np.abs(boxes[:, None, :] - gt[None, :, :]).sum(-1)
        - weights.giou * pairwise_giou(boxes, gt)
        - weights.cls * probs[:, None]
    )
    rows, cols = linear_sum_assignment(cost)
    return rows.astype(np.int64), cols.astype(np.int64)


_TO_XYXY = np.array([[1, 0, 1, 0], [0, 1, 0, 1], [-0.5, 0, 0.5, 0], [0, -0.5, 0, 0.5]], dtype=np.float64)
_LO = np.array([[1, 0], [0, 1], [0, 0], [0, 0]], dtype=np.float64)
_HI = np.array([[0, 0], [0, 0], [1, 0], [0, 1]], dtype=np.float64)
_COL0 = np.array([[1.0], [0.0]])
_COL1 = np.array([[0.0], [1.0]])


def _prod2(wh: Tensor) -> Tensor:
    return T.mul(T.matmul(wh, Tensor(_COL0)), T.matmul(wh, Tensor(_COL1)))


def giou_pairs(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable GIoU of aligned (M,4) cxcywh rows; returns (M,1)."""
    p = T.matmul(pred, Tensor(_TO_XYXY))
    g = Tensor(cxcywh_to_xyxy(gt))
    p_lo, p_hi = T.matmul(p, Tensor(_LO)), T.matmul(p, Tensor(_HI))
    g_lo, g_hi = T.matmul(g, Tensor(_LO)), T.matmul(g, Tensor(_HI))
    inter = _prod2(T.relu(T.minimum(p_hi, g_hi) - T.maximum(p_lo, g_lo)))
    union = _prod2(p_hi - p_lo) + _prod2(g_hi - g_lo) - inter
    enclosing = _prod2(T.maximum(p_hi, g_hi) - T.minimum(p_lo, g_lo))
    return inter / union - (enclosing - union) / enclosing


def training_loss(
    output: ModelOutput,
    gt_boxes: Sequence[np.ndarray],
    true_counts: Sequence[int],
    weights: LossWeights = LossWeights(),
    count_loss_all_layers: bool = False,
) -> LossBreakdown:
    """Set-prediction loss plus count cross-entropy.

    ``gt_boxes[b]`` is a (n_b, 4) array of normalized cxcywh boxes, possibly
    empty. Box terms are summed over matched pairs and divided by the total
    number of ground-truth boxes in the batch (at least 1).
    """
    boxes, logits = output.boxes, output.logits
    b, l, _ = boxes.shape
    if len(gt_boxes) != b or len(true_counts) != b:
        raise ShapeMismatch("training_loss", boxes.shape, (len(gt_boxes), len(true_counts)))
    probs = 1.0 / (1.0 + np.exp(-logits.data))
    batch_idx, slot_idx, gt_rows, assignments = [], [], [], []
    for i in range(b):
        gt = np.asarray(gt_boxes[i], dtype=np.float64).reshape(-1, 4)
        rows, cols = hungarian_assignment(boxes.data[i], probs[i], gt, weights)
        assignments.append((rows, cols))
        batch_idx.append(np.full(len(rows), i))
        slot_idx.append(rows)
        gt_rows.append(gt[cols])
    batch_idx = np.concatenate(batch_idx).astype(np.int64)
    slot_idx = np.concatenate(slot_idx).astype(np.int64)
    matched_gt = np.concatenate(gt_rows) if gt_rows else np.zeros((0, 4))
    num_boxes = max(len(matched_gt), 1)

    targets = np.zeros((b, l))
    targets[batch_idx, slot_idx] = 1.0
    cls = T.bce_with_logits(logits, targets)
    total = T.scale(cls, weights.cls)
    l1_val = giou_val = 0.0
    if len(matched_gt):
        pred = T.take(boxes, (batch_idx, slot_idx))
        l1 = T.scale(T.l1_loss(pred, matched_gt, reduction="sum"), 1.0 / num_boxes)
        gl = T.scale(T.sum_(1.0 - giou_pairs(pred, matched_gt)), 1.0 / num_boxes)
        total = total + T.scale(l1, weights.l1) + T.scale(gl, weights.giou)
        l1_val, giou_val = l1.item(), gl.item()

    num_val = 0.0
    bins = [bin_of(n) for n in true_counts]
    heads = [c for c in output.counts if c is not None]
    if heads:
        used = heads if count_loss_all_layers else heads[-1:]
        ce_terms = [T.cross_entropy(c.logits, bins) for c in used]
        ce = ce_terms[0]
        for extra in ce_terms[1:]:
            ce = ce + extra
        total = total + T.scale(ce, weights.num)
        num_val = ce.item()
    return LossBreakdown(total, l1_val, giou_val, cls.item(), num_val, assignments)
