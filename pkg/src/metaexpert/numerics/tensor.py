"""Dense float64 tensors with reverse-mode differentiation.

Every op builds a node that keeps references to its operands and a closure
mapping the upstream gradient to operand gradients. ``backward`` orders the
reachable nodes topologically (the tape) and walks them once in reverse.

Shape rules are deliberately narrow:

* ``add``: identical shapes, or ``(B, n) + (n,)`` (bias over batch, either
  operand order).
* ``mul``: identical shapes only. ``scale`` multiplies by a Python float.
* ``row_scale``: ``(B, n) * (B,)`` scales each row by one entry.
* ``matmul``: ``(B, n) @ (n, m) -> (B, m)``.
* ``concat``: 2-D operands with equal leading dim, joined on the last axis.
* ``gather``: ``(B, C)`` indexed per row by an integer vector of length B.
* ``softmax`` / ``log_softmax``: over the last axis.
* ``sum`` / ``mean``: full reductions to a scalar.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "build_tape",
    "concat",
    "cross_entropy",
    "cross_entropy_logits",
    "gather",
    "grad_enabled",
    "grad_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "row_scale",
    "scale",
    "softmax",
    "tensor",
    "total",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's rule."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording them (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                 backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_err(op: str, *shapes) -> ShapeError:
    joined = " and ".join(str(list(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {joined}")


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (operands first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    tape = build_tape(loss)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return Tensor._from_op(a.data + b.data, (a, b),
                               lambda g: (g, g.sum(axis=0)), "add")
    if a.ndim == 1 and b.ndim == 2 and b.shape[1] == a.shape[0]:
        return Tensor._from_op(a.data + b.data, (a, b),
                               lambda g: (g.sum(axis=0), g), "add")
    raise _shape_err("add", a.shape, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_err("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    if x.ndim != 2 or s.ndim != 1 or x.shape[0] != s.shape[0]:
        raise _shape_err("row_scale", x.shape, s.shape)
    xd, sd = x.data, s.data

    def bw(g):
        return g * sd[:, None], (g * xd).sum(axis=1)

    return Tensor._from_op(xd * sd[:, None], (x, s), bw, "row_scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._from_op(np.where(pos, x.data, 0.0), (x,),
                           lambda g: (g * pos,), "relu")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.ndim < 1:
        raise ShapeError(f"softmax: needs at least one axis, got shape {list(x.shape)}")
    p = _softmax_np(x.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim < 1:
        raise ShapeError(f"log_softmax: needs at least one axis, got shape {list(x.shape)}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (x,), bw, "log_softmax")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return Tensor._from_op(out, (x,), lambda g: (g / xd,), "log")


def total(x: Tensor) -> Tensor:
    """Sum of all elements."""
    shape = x.shape
    return Tensor._from_op(np.asarray(x.data.sum()), (x,),
                           lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    return Tensor._from_op(np.asarray(x.data.sum() / n), (x,),
                           lambda g: (np.full(shape, float(g) / n),), "mean")


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: no operands")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.ndim != 2 or p.shape[:-1] != lead:
            raise _shape_err("concat", parts[0].shape, p.shape)
    widths = [p.shape[-1] for p in parts]
    edges = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=-1),
                           tuple(parts), bw, "concat")


def _check_index(op: str, x: Tensor, idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx)
    if x.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise _shape_err(op, x.shape, idx.shape)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"{op}: indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"{op}: index out of range for shape {list(x.shape)}")
    return idx.astype(np.int64)


def gather(x: Tensor, idx) -> Tensor:
    """Pick ``x[i, idx[i]]`` for every row."""
    idx = _check_index("gather", x, idx)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return Tensor._from_op(x.data[rows, idx], (x,), bw, "gather")


def _mask_weights(op: str, n: int, mask, denom) -> tuple[np.ndarray, float]:
    m = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != (n,):
        raise _shape_err(op, (n,), m.shape)
    d = float(n if denom is None else denom)
    if d <= 0:
        raise ValueError(f"{op}: denominator must be positive, got {d}")
    return m, d


def cross_entropy(probs: Tensor, targets, mask=None, denom: float | None = None) -> Tensor:
    """Mean of ``-log p[i, y_i]`` weighted by ``mask``.

    The denominator is the batch size unless ``denom`` is given; masked-out
    rows contribute zero but still count in the denominator.
    """
    targets = _check_index("cross_entropy", probs, targets)
    m, d = _mask_weights("cross_entropy", probs.shape[0], mask, denom)
    rows = np.arange(probs.shape[0])
    picked = probs.data[rows, targets]
    live = m != 0
    with np.errstate(divide="ignore"):
        nll = np.where(live, -np.log(np.where(live, picked, 1.0)), 0.0)
    value = (m * nll).sum() / d
    shape = probs.shape

    def bw(g):
        out = np.zeros(shape)
        safe = np.where(live, picked, 1.0)
        out[rows, targets] = np.where(live, -float(g) * m / (d * safe), 0.0)
        return (out,)

    return Tensor._from_op(np.asarray(value), (probs,), bw, "cross_entropy")


def cross_entropy_logits(logits: Tensor, targets, mask=None,
                         denom: float | None = None) -> Tensor:
    """Fused ``cross_entropy(softmax(logits), ...)`` that never forms ``log 0``."""
    targets = _check_index("cross_entropy_logits", logits, targets)
    m, d = _mask_weights("cross_entropy_logits", logits.shape[0], mask, denom)
    rows = np.arange(logits.shape[0])
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - shifted[rows, targets]
    value = (m * nll).sum() / d
    p = _softmax_np(logits.data)

    def bw(g):
        out = p.copy()
        out[rows, targets] -= 1.0
        return (out * (float(g) * m / d)[:, None],)

    return Tensor._from_op(np.asarray(value), (logits,), bw, "cross_entropy_logits")


def grad_norm(tensors: Iterable[Tensor]) -> float:
    """L2 norm over the gradients of ``tensors``; a missing grad counts as zero."""
    acc = 0.0
    for t in tensors:
        if t.grad is not None:
            acc += float((t.grad * t.grad).sum())
    return float(np.sqrt(acc))
