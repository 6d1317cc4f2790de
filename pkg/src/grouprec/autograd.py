"""Dense float64 tensors with reverse-mode differentiation and Adagrad.

Every op records a node on the tape when any input requires grad. Nodes carry
a monotonically increasing sequence number; ``backward`` walks the nodes
reachable from the loss in descending sequence order, which is the reverse of
execution order.
"""

from __future__ import annotations

import contextlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (evaluation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_seq", "op")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _record(out_value, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_value, requires_grad=False)
    out.op = op
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            # copy: the same array may be handed to several parents
            t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.value.shape)
        else:
            t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record(a.value + b.value, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _record(a.value - b.value, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (numpy broadcasting)."""
    _broadcast_shape("elementwise_mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.value, b.shape))

    return _record(a.value * b.value, "elementwise_mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.value * c, "scale", (a,), lambda g: _accum(a, g * c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a`` of shape (..., n) times a 2-d ``b`` of shape (n, m)."""
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.value.T)
        if b.requires_grad:
            a2 = a.value.reshape(-1, a.shape[-1])
            _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))

    return _record(a.value @ b.value, "matmul", (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    shapes = [t.shape for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *shapes) from None
    sizes = [s[axis] for s in shapes]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, part)

    return _record(value, "concat", tuple(tensors), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _record(y, "tanh", (a,), lambda g: _accum(a, g * (1.0 - y * y)))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _record(a.value * mask, "relu", (a,), lambda g: _accum(a, g * mask))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = sigmoid_np(a.value)
    return _record(y, "sigmoid", (a,), lambda g: _accum(a, g * y * (1.0 - y)))


def softplus(a: Tensor) -> Tensor:
    x = a.value
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    s = sigmoid_np(x)
    return _record(y, "softplus", (a,), lambda g: _accum(a, g * s))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.value)
    return _record(np.abs(a.value), "abs", (a,), lambda g: _accum(a, g * s))


def l2_normalize(a: Tensor) -> Tensor:
    """Normalize along the last axis; zero rows stay zero."""
    x = a.value
    # rescale by the largest entry first so tiny or huge rows do not under/overflow
    m = np.abs(x).max(axis=-1, keepdims=True)
    ms = np.where(m > 0, m, 1.0)
    norm = m * np.sqrt(((x / ms) ** 2).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, x / safe, 0.0)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, np.where(norm > 0, (g - y * dot) / safe, 0.0))

    return _record(y, "l2_normalize", (a,), bw)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over ``axis``. Masked-out entries get weight 0; fully masked slices are all zero."""
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _record(y, "softmax_over_axis", (a,), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _record(y, "sum", (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.value.size
    return _record(a.value.mean(), "mean", (a,), lambda g: _accum(a, np.full(a.shape, g / n)))


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.value.reshape(shape), "reshape", (a,), lambda g: _accum(a, g.reshape(a.shape)))


def gather_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: rows of a 2-d table selected by an integer array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError("gather_rows", table.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")

    def bw(g):
        if table.requires_grad:
            rows = table.shape[0]
            flat = index.ravel()
            g2 = g.reshape(-1, table.shape[1])
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            for j in range(table.shape[1]):
                table.grad[:, j] += np.bincount(flat, weights=g2[:, j], minlength=rows)

    return _record(table.value[index], "gather_rows", (table,), bw)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.value.copy())


def square(a: Tensor) -> Tensor:
    return _record(a.value ** 2, "square", (a,), lambda g: _accum(a, 2.0 * a.value * g))


def bce_with_logits(z: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of sigmoid(z) against labels, in logit space."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError("bce_with_logits", z.shape, y.shape)
    x = z.value
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    p = sigmoid_np(x)
    return _record(loss.mean(), "bce", (z,), lambda g: _accum(z, g * (p - y) / n))


def attention_pool(seq: Tensor, cand: Tensor, mask, w_seq: Tensor, w_cand: Tensor, w_prod: Tensor,
                   b: Tensor, w_out: Tensor, b_out: Tensor) -> Tensor:
    """Fused target attention.

    h = relu(S @ w_seq + (c @ w_cand)[:, None] + (S * c[:, None]) @ w_prod + b)
    a = masked softmax over L of (h @ w_out + b_out)
    out = sum_l a_l * S_l
    with S (B, L, d), c (B, d), mask (B, L), w_out (s, 1). Fully masked rows give zeros.
    """
    S, c = seq.value, cand.value
    if S.ndim != 3 or c.shape != (S.shape[0], S.shape[2]):
        raise ShapeError("attention_pool", S.shape, c.shape)
    mask = np.asarray(mask, dtype=bool)
    B, L, d = S.shape
    # S @ w_seq + (S * c) @ w_prod == S @ (w_seq + c[:, :, None] * w_prod): one batched product
    Wb = w_seq.value[None] + c[:, :, None] * w_prod.value[None]
    pre = np.matmul(S, Wb)
    pre += (c @ w_cand.value + b.value)[:, None, :]
    H = np.maximum(pre, 0.0)
    scores = (H @ w_out.value)[..., 0] + b_out.value[0]
    scores = np.where(mask, scores, -np.inf)
    m = scores.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(scores - m)
    tot = e.sum(axis=1, keepdims=True)
    a = np.where(tot > 0, e / np.where(tot > 0, tot, 1.0), 0.0)
    out = np.matmul(a[:, None, :], S)[:, 0, :]

    def bw(g):
        ga = np.matmul(S, g[:, :, None])[..., 0]
        gs = a * (ga - (a * ga).sum(axis=1, keepdims=True))
        gpre = H > 0
        gpre = gpre * gs[:, :, None]
        gpre *= w_out.value[:, 0]
        gpre_sum = gpre.sum(axis=1)
        if w_out.requires_grad:
            _accum(w_out, np.matmul(gs[:, None, :], H).sum(axis=0).reshape(-1, 1))
        if b_out.requires_grad:
            _accum(b_out, np.array([gs.sum()]))
        if b.requires_grad:
            _accum(b, gpre_sum.sum(axis=0))
        if w_cand.requires_grad:
            _accum(w_cand, c.T @ gpre_sum)
        gWb = np.matmul(S.transpose(0, 2, 1), gpre)  # (B, d, s)
        if w_seq.requires_grad:
            _accum(w_seq, gWb.sum(axis=0))
        if w_prod.requires_grad:
            _accum(w_prod, np.einsum("bd,bds->ds", c, gWb))
        if seq.requires_grad:
            gS = np.matmul(gpre, Wb.transpose(0, 2, 1))
            gS += a[:, :, None] * g[:, None, :]
            _accum(seq, gS)
        if cand.requires_grad:
            _accum(cand, gpre_sum @ w_cand.value.T + np.einsum("bds,ds->bd", gWb, w_prod.value))

    return _record(out, "attention_pool", (seq, cand, w_seq, w_cand, w_prod, b, w_out, b_out), bw)


FORWARD_OPS = {
    "matmul": matmul,
    "add": add,
    "concat": concat,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "l2_normalize": l2_normalize,
    "softmax_over_axis": softmax,
    "elementwise_mul": mul,
    "mean": mean,
}


def forward_op(kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- graph


def graph_nodes(loss: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``loss``, in reverse execution order."""
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def backward(loss: Tensor):
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = graph_nodes(loss)
    loss.grad = np.ones_like(loss.value)
    # parents always carry a smaller sequence number, so each node's grad is
    # complete by the time it is visited; intermediate grads are freed after use
    for node in nodes:
        if node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- optimizer


@dataclass
class AdagradState:
    base_lr: float = 0.01
    lr_floor: float = 0.001
    epsilon: float = 1e-8
    total_steps: int = 0
    initial_accumulator: float = 0.0
    step: int = 0
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self) -> float:
        """Linear decay from base_lr over total_steps, clamped at lr_floor."""
        if self.total_steps <= 0:
            return self.base_lr
        frac = min(self.step / self.total_steps, 1.0)
        return max(self.base_lr + (self.lr_floor - self.base_lr) * frac, self.lr_floor)


def adagrad_step(params: dict[str, Tensor], state: AdagradState):
    lr = state.lr()
    for name, p in params.items():
        g = p.grad
        acc = state.accumulators.get(name)
        if acc is None:
            acc = np.full_like(p.value, state.initial_accumulator)
            state.accumulators[name] = acc
        acc += g * g
        p.value -= lr * g / (np.sqrt(acc) + state.epsilon)
        p.zero_grad()
    state.step += 1


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Relative error per entry is |a - n| / max(|a| + |n|, floor) where the floor
    keeps entries with both gradients near zero from dominating.
    ``max_entries`` samples that many coordinates per parameter.
    """
    zero_grads(params.values())
    loss = loss_fn()
    backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    per_param = {}
    total = 0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            old = flat[i]
            with no_grad():
                flat[i] = old + h
                lp = loss_fn().value.item()
                flat[i] = old - h
                lm = loss_fn().value.item()
            flat[i] = old
            num = (lp - lm) / (2 * h)
            a = a_flat[i]
            denom = max(abs(a) + abs(num), 1e-6)
            worst = max(worst, abs(a - num) / denom)
        per_param[name] = worst
        total += len(idx)
    zero_grads(params.values())
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, tolerance, total)


# ---------------------------------------------------------------- checkpoints
#
# Line-delimited JSON. First line is a header {"format": "grouprec-params", "version": 1};
# each further line is {"name": str, "shape": [int, ...], "values": [float, ...]} in
# sorted name order. Floats are written with repr() so values round-trip exactly.


def save_params(params: dict[str, Tensor], path: str | Path):
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        f.write(json.dumps({"format": "grouprec-params", "version": 1}) + "\n")
        for name in sorted(params):
            v = params[name].value
            vals = ",".join(repr(float(x)) for x in v.reshape(-1))
            f.write(f'{{"name": {json.dumps(name)}, "shape": {json.dumps(list(v.shape))}, "values": [{vals}]}}\n')


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with Path(path).open(encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("format") != "grouprec-params":
            raise ValueError(f"{path}: not a parameter file")
        for line in f:
            rec = json.loads(line)
            out[rec["name"]] = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
    return out
