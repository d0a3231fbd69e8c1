"""Finite-difference verification of the decoder's analytic gradients."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ngdino import NGDINO, LossWeights, ModelConfig, training_loss

EPS = 1e-5
TOLERANCE = 1e-4
# gradients that vanish identically (attention key biases) leave only rounding noise
SCALE_FLOOR = 1e-5
SMALL = ModelConfig(dim=8, num_queries=4, per_bin_length=2, ffn_hidden=12)


@dataclass(frozen=True)
class GroupError:
    name: str
    size: int
    max_abs_analytic: float
    max_abs_numeric: float
    rel_error: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |a|, max |n|, SCALE_FLOOR)."""
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), SCALE_FLOOR)
    return float(np.abs(analytic - numeric).max() / scale)


def _problem(seed: int, config: ModelConfig, batch: int = 2):
    rng = np.random.default_rng([seed, 7])
    model = NGDINO(config, seed=seed)
    # re-draw every weight so zero-initialized groups carry real gradients
    for t in model.named_parameters().values():
        t.data = rng.normal(0.0, 0.5, size=t.shape)
    d, l = config.dim, config.num_queries
    q = rng.normal(size=(batch, l, d))
    ctx = rng.normal(size=(batch, l + 1, d))
    ref = rng.uniform(0.2, 0.8, size=(batch, l, 4))
    ref[..., 2:] = rng.uniform(0.05, 0.3, size=(batch, l, 2))
    gts = [rng.uniform(0.2, 0.8, size=(k, 4)) * np.array([1, 1, 0.3, 0.3]) + np.array([0, 0, 0.05, 0.05])
           for k in range(1, batch + 1)]
    counts = [len(g) for g in gts]
    return model, q, ctx, ref, gts, counts


def check_model(seed: int = 0, config: ModelConfig = SMALL, eps: float = EPS) -> list[GroupError]:
    """Compare backprop against central differences for every parameter group.

    The Hungarian assignment is fixed from the unperturbed forward pass so the
    loss is a smooth function of the weights around the evaluation point.
    """
    model, q, ctx, ref, gts, counts = _problem(seed, config)
    params = model.named_parameters()
    weights = LossWeights()
    out = model(q, ctx, ref)
    loss = training_loss(out, gts, counts, weights)
    fixed = [(r, c) for r, c in loss.assignments]
    selected = out.selected
    loss.total.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}

    def value() -> float:
        o = model(q, ctx, ref, count_override=selected[0])
        return _fixed_loss(o, gts, counts, weights, fixed).item()

    errors = []
    for name, t in params.items():
        num = np.zeros_like(t.data)
        flat, nflat = t.data.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        a = analytic[name]
        errors.append(GroupError(name, t.data.size, float(np.abs(a).max(initial=0.0)),
                                 float(np.abs(num).max(initial=0.0)), relative_error(a, num)))
    return errors


def _fixed_loss(out, gts, counts, weights, fixed):
    """The training loss with a frozen slot assignment."""
    from .ngdino import bin_of, giou_pairs

    boxes, logits = out.boxes, out.logits
    b, l, _ = boxes.shape
    bi = np.concatenate([np.full(len(r), i) for i, (r, _) in enumerate(fixed)]).astype(np.int64)
    si = np.concatenate([r for r, _ in fixed]).astype(np.int64)
    matched = np.concatenate([np.asarray(gts[i]).reshape(-1, 4)[c] for i, (_, c) in enumerate(fixed)])
    targets = np.zeros((b, l))
    targets[bi, si] = 1.0
    total = T.scale(T.bce_with_logits(logits, targets), weights.cls)
    n = max(len(matched), 1)
    if len(matched):
        pred = T.take(boxes, (bi, si))
        total = total + T.scale(T.l1_loss(pred, matched, reduction="sum"), weights.l1 / n)
        total = total + T.scale(T.sum_(1.0 - giou_pairs(pred, matched)), weights.giou / n)
    heads = [c for c in out.counts if c is not None]
    if heads:
        total = total + T.scale(T.cross_entropy(heads[-1].logits, [bin_of(c) for c in counts]), weights.num)
    return total


def max_error(errors: list[GroupError]) -> float:
    return max((e.rel_error for e in errors), default=0.0)


def format_table(errors: list[GroupError]) -> str:
    width = max((len(e.name) for e in errors), default=10)
    lines = [f"{'parameter group':<{width}}  {'size':>5}  {'rel error':>10}"]
    lines += [f"{e.name:<{width}}  {e.size:>5}  {e.rel_error:10.3e}" for e in errors]
    lines.append(f"max relative error {max_error(errors):.3e} (tolerance {TOLERANCE:.0e})")
    return "\n".join(lines)


@contextmanager
def corrupted_backward(op_name: str = "relu", factor: float = 1.5):
    """Test-only hook: scale the gradient of one tensor op to prove the check can fail."""
    original = getattr(T, op_name)

    def broken(*args, **kwargs):
        out = original(*args, **kwargs)
        inner = out._backward
        if inner is not None:
            out._backward = lambda g: inner(g * factor)
        return out

    setattr(T, op_name, broken)
    try:
        yield
    finally:
        setattr(T, op_name, original)
