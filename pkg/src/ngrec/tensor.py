"""Dense float64 arrays with reverse-mode differentiation.

Each operation computes its forward value with numpy and, when any input
requires a gradient, records a closure that pushes the output gradient back
to its inputs. Broadcasting is limited to a missing leading batch dimension:
an operand whose shape is a suffix of the other's is repeated over the
leading axes, anything else raises ``ShapeMismatch``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import IoFailure, MalformedDocument, ShapeMismatch

CHECKPOINT_FORMAT = "ngrec-checkpoint/1"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _suffix_broadcast(op: str, a: Tensor, b: Tensor):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeMismatch(op, sa, sb)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), -_reduce_to(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast("div", a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast("maximum", a, b)
    # ties split the gradient evenly, so max(x, x) has derivative 1 in x
    wa = (a.data > b.data) + 0.5 * (a.data == b.data)
    return _make(
        np.maximum(a.data, b.data),
        (a, b),
        lambda g: (_reduce_to(g * wa, a.shape), _reduce_to(g * (1.0 - wa), b.shape)),
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast("minimum", a, b)
    wa = (a.data < b.data) + 0.5 * (a.data == b.data)
    return _make(
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (_reduce_to(g * wa, a.shape), _reduce_to(g * (1.0 - wa), b.shape)),
    )


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", x.shape, shape) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def expand(x: Tensor, batch: int) -> Tensor:
    """Repeat ``x`` along a new leading batch axis."""
    out = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=0),))


def concat_rows(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeMismatch("concat_rows", ref, t.shape)
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=ax)),
    )


def slice_rows(x: Tensor, start: int, end: int) -> Tensor:
    if not 0 <= start < end <= x.shape[0]:
        raise ShapeMismatch(f"slice_rows[{start}:{end}]", x.shape)

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:end] = g
        return (full,)

    return _make(x.data[start:end].copy(), (x,), backward)


def gather_slices(bank: Tensor, starts: Sequence[int], length: int) -> Tensor:
    """Stack ``bank[s:s+length]`` for each start into a (len(starts), length, ...) tensor."""
    starts = np.asarray(starts, dtype=np.int64)
    if starts.ndim != 1 or np.any(starts < 0) or np.any(starts + length > bank.shape[0]):
        raise ShapeMismatch(f"gather_slices(length={length})", bank.shape, starts.shape)
    idx = starts[:, None] + np.arange(length)[None, :]

    def backward(g):
        full = np.zeros_like(bank.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(bank.data[idx], (bank,), backward)


def take(x: Tensor, index) -> Tensor:
    """Numpy advanced indexing with scatter-add backward."""

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the last two axes.

    Either operand may be a plain matrix shared across the other's batch axes;
    otherwise leading axes must agree exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _reduce_to(ga, a.shape),
            None if gb is None else _reduce_to(gb, b.shape),
        )

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in_features, out_features)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch("linear", x.shape, weight.shape)
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    ax = axis % x.ndim
    return _make(
        x.data.sum(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),),
    )


def mean_pool(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatch(f"mean_pool(axis={axis})", x.shape)
    ax = axis % x.ndim
    n = x.shape[ax]
    return _make(
        x.data.mean(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape) / n,),
    )


def mean(x: Tensor) -> Tensor:
    return scale(sum_(x), 1.0 / x.data.size)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatch(f"softmax(axis={axis})", x.shape)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_to(g * xhat, gain.shape), _reduce_to(g, bias.shape)

    return _make(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits) rows."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch("cross_entropy", logits.shape, targets.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return _make(loss, (logits,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy with 0/1 targets, computed stably from logits."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeMismatch("bce_with_logits", logits.shape, t.shape)
    x = logits.data
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    n = x.size
    return _make(loss, (logits,), lambda g: ((p - t) * (g / n),))


def l1_loss(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch("l1_loss", pred.shape, target.shape)
    diff = abs_(sub(pred, target))
    return mean(diff) if reduction == "mean" else sum_(diff)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """softmax(q k^T / sqrt(d_head)) v over (batch, length, dim) inputs.

    ``k`` and ``v`` may also be unbatched (length, dim) matrices shared by every
    batch item. The feature axis is split evenly into ``heads`` groups.
    """
    if k.ndim == 2:
        k = expand(k, q.shape[0])
    if v.ndim == 2:
        v = expand(v, q.shape[0])
    if q.ndim != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeMismatch("scaled_dot_attention", q.shape, k.shape, v.shape)
    b, lq, d = q.shape
    lk = k.shape[1]
    if d % heads:
        raise ShapeMismatch(f"scaled_dot_attention(heads={heads})", q.shape)
    dh = d // heads
    if heads == 1:
        scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(dh))
        return matmul(softmax(scores, axis=-1), v)

    def split(t, n):
        return transpose(reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(dh))
    out = matmul(softmax(scores, axis=-1), vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (b, lq, d))


def argmax(x: Tensor, axis: int = -1) -> np.ndarray:
    """Index of the largest entry, lowest index on ties; never on the tape."""
    return np.argmax(x.data, axis=axis)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: dict[str, Tensor], path, metadata: dict | None = None) -> None:
    """Write parameters as canonical JSON: ``{name: {"shape": [...], "values": [...]}}``.

    Values are Python float reprs, which round-trip float64 exactly.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "metadata": metadata or {},
        "params": {
            name: {"shape": list(t.shape), "values": [float(v) for v in t.data.reshape(-1)]}
            for name, t in sorted(params.items())
        },
    }
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from None


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"checkpoint is not JSON: {exc.msg}", f"byte offset {exc.pos}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise MalformedDocument(f"unexpected checkpoint format {doc.get('format')!r}")
    arrays = {}
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise MalformedDocument(f"parameter {name} has {values.size} values for shape {shape}")
        arrays[name] = values.reshape(shape)
    return arrays, doc.get("metadata", {})


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
