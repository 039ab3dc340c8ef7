"""
Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to one gradient per
parent. Tensors get a monotonically increasing id at creation, so sorting the
ancestors of a loss by id gives a valid topological order (parents are always
created before their children). :class:`Graph` is that sorted node list and
``backward`` walks it in reverse.

Only the operations the forecasting network needs are provided. Binary
arithmetic follows numpy broadcasting; gradients are summed back to the
operand shapes.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GradientError, ShapeError

MASK_FILL = -1e9

_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.id = next(_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], op: str, fn: BackwardFn) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.id = next(_ids)
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph + backward
# ---------------------------------------------------------------------------


class Graph:
    """Differentiable ancestors of an output, in creation (insertion) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node.id in seen or not node.requires_grad:
                continue
            seen[node.id] = node
            stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda n: n.id))

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Populate ``.grad`` on every tensor in the graph of a scalar ``loss``.

    Gradients accumulate into leaves, so call ``zero_grad`` between steps.
    Returns the graph that was traversed.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor with requires_grad=True")
    graph = graph if graph is not None else Graph.trace(loss)
    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.id)
            pending[parent.id] = pg if prev is None else prev + pg
    return graph


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul",
                   lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                              _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), "relu", lambda g: (g * on,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inverse),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(np.broadcast_to(x.data, shape), (x,), "broadcast",
                   lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def fn(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", fn)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum", fn)


def gather_time(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-row gather along axis 1: ``out[b, m] = x[b, index[b, m]]``.

    ``x`` is ``[B, T, ...]`` and ``index`` an integer array ``[B, M]``.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_time: index {index.shape} does not match input {x.shape}")
    rows = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        np.add.at(gx, (rows, index), g)
        return (gx,)

    return _result(x.data[rows, index], (x,), "gather", fn)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {list(a.shape)} and {list(b.shape)}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply shapes {list(a.shape)} and {list(b.shape)}") from exc

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), "matmul", fn)


def conv1d_causal(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Causal dilated 1-D convolution.

    ``x`` is ``[C, T]`` or ``[B, C, T]``; ``kernel`` is ``[O, C, k]``. Tap
    ``kernel[..., k-1]`` multiplies the current step and tap ``j`` the step
    ``(k-1-j)*dilation`` earlier. The left edge is zero padded so the output
    keeps length ``T``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if int(dilation) != dilation or dilation < 1:
        raise ShapeError(f"conv1d_causal: dilation must be a positive integer, got {dilation}")
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d_causal: kernel must be [out, in, k], got {list(kernel.shape)}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv1d_causal: input channels {list(x.shape)} do not match kernel {list(kernel.shape)}")
    n, c, t = xd.shape
    o, _, k = kernel.shape
    pad = (k - 1) * dilation
    xpad = np.concatenate([np.zeros((n, c, pad)), xd], axis=2) if pad else xd
    # cols[b, c, j, t] = xpad[b, c, t + j*dilation]
    cols = np.stack([xpad[:, :, j * dilation: j * dilation + t] for j in range(k)], axis=2)
    cols = cols.reshape(n, c * k, t)
    w = kernel.data.reshape(o, c * k)
    out = w @ cols

    def fn(g):
        g3 = g[None] if squeeze else g
        gw = None
        if kernel.requires_grad:
            gw = np.einsum("bot,bjt->oj", g3, cols).reshape(o, c, k)
        gx = None
        if x.requires_grad:
            gcols = (w.T @ g3).reshape(n, c, k, t)
            gpad = np.zeros((n, c, t + pad))
            for j in range(k):
                gpad[:, :, j * dilation: j * dilation + t] += gcols[:, :, j]
            gx = gpad[:, :, pad:]
            if squeeze:
                gx = gx[0]
        return gx, gw

    return _result(out[0] if squeeze else out, (x, kernel), "conv1d", fn)


# ---------------------------------------------------------------------------
# attention + losses
# ---------------------------------------------------------------------------


def softmax_masked(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask == 1`` entries.

    Masked logits get ``MASK_FILL`` added before the max subtraction. Masked
    entries come out exactly 0 and rows with no unmasked entry are all 0.
    """
    logits = as_tensor(logits)
    m = np.broadcast_to(mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64),
                        logits.shape)
    z = logits.data + np.where(m > 0, 0.0, MASK_FILL)
    e = np.exp(z - z.max(axis=-1, keepdims=True)) * (m > 0)
    s = e.sum(axis=-1, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), "softmax_masked", fn)


def pinball(pred: Tensor, target, quantile, weight=None) -> Tensor:
    """Elementwise quantile loss ``q(y-p)+ + (1-q)(p-y)+``.

    ``target``, ``quantile`` and ``weight`` are constants broadcastable to
    ``pred``. At ``p == y`` the gradient is the over-forecast branch ``1-q``.
    """
    y = np.asarray(target, dtype=np.float64)
    q = np.asarray(quantile, dtype=np.float64)
    w = np.ones(()) if weight is None else np.asarray(weight, dtype=np.float64)
    diff = y - pred.data
    loss = (q * np.maximum(diff, 0.0) + (1.0 - q) * np.maximum(-diff, 0.0)) * w
    slope = np.where(pred.data < y, -q, 1.0 - q) * w

    return _result(loss, (pred,), "pinball", lambda g: (_unbroadcast(g * slope, pred.shape),))
