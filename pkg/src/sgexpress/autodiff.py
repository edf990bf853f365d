"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its parents and a closure mapping the output gradient
to parent gradients. :func:`backward` walks the graph in reverse topological
order (iterative depth-first post-order, parents visited in argument order),
so gradient accumulation order is fixed for a given graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_grad_enabled = True

# Added to attention scores at masked positions; exp() of it underflows to 0.
MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named trainable tensor tagged with the stages in which it may train."""

    __slots__ = ("name", "trainable_in_stage")

    def __init__(self, name: str, data, trainable_in_stage: Iterable[int] = (1, 2, 3)):
        super().__init__(data, requires_grad=True)
        stages = frozenset(int(s) for s in trainable_in_stage)
        if not stages <= {1, 2, 3}:
            raise ValueError(f"trainable_in_stage must be a subset of {{1, 2, 3}}, got {sorted(stages)}")
        self.name = name
        self.trainable_in_stage = stages

    @property
    def tensor(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, stages={sorted(self.trainable_in_stage)})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), _bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), _bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _result(out, (x,), _bw, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), _bw, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), _bw, "getitem")


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather along axis 0; ``indices`` may have any integer shape."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return _result(x.data[idx], (x,), _bw, "take_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        out = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                out.append(g[tuple(sl)])
            else:
                out.append(None)
        return tuple(out)

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, _bw, "concat")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x of shape (..., d_in) and a 2-D weight, as one node."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    d_in, d_out = weight.shape
    out = x.data @ weight.data
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d_out,):
            raise ShapeError(f"linear bias {bias.shape} does not match output width {d_out}")
        out = out + bias.data
        parents = (x, weight, bias)

    def _bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g @ weight.data.T) if x.requires_grad else None
        gw = (x.data.reshape(-1, d_in).T @ g2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _result(out, parents, _bw, "linear")


def attention_core(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None
                   ) -> tuple[Tensor, np.ndarray]:
    """softmax(q k^T / sqrt(d_head) + bias) v over (..., n, d_head) operands.

    ``bias`` is a constant additive score mask broadcastable to the score
    shape. Returns the output tensor and the attention weights (plain array).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if bias is not None:
        scores = scores + bias
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def _bw(g):
        gv = np.swapaxes(p, -1, -2) @ g if v.requires_grad else None
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k.data if q.requires_grad else None
        gk = np.swapaxes(gs, -1, -2) @ q.data if k.requires_grad else None
        return gq, gk, gv

    return _result(out, (q, k, v), _bw, "attention"), p


# ---------------------------------------------------------------------------
# normalization and probabilities
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), _bw, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def _bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), _bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: last extent {d} does not match gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), _bw, "layer_norm")


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax.

    ``logits`` has shape (..., V); ``targets`` matches the leading shape.
    ``weights`` (optional, same leading shape) selects and weights rows; the
    mean divides by the weight total.
    """
    logits = as_tensor(logits)
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = np.asarray(targets, dtype=np.intp).reshape(-1)
    w = np.ones(len(t)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one weighted position")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(len(t))
    safe_t = np.where(w > 0, t, 0)
    nll = lse - zs[rows, safe_t]
    loss = float((w * nll).sum() / total)

    def _bw(g):
        p = np.exp(zs - lse[:, None])
        p[rows, safe_t] -= 1.0
        p *= (w / total)[:, None] * g
        return (p.reshape(logits.shape),)

    return _result(np.array(loss), (logits,), _bw, "cross_entropy")


# ---------------------------------------------------------------------------
# the backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray] | None:
    """Populate ``.grad`` on every tensor upstream of the scalar ``loss``.

    Gradients accumulate into existing ``.grad`` slots of leaves, so callers
    zero them between steps. With ``params`` given, returns ``{name: grad}``
    (zeros for parameters the loss does not depend on).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        order = _topological_order(loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    if params is None:
        return None
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
