"""Small define-by-run reverse-mode differentiation engine on top of numpy.

Only the primitives needed by the segmentation network and its losses are
provided. Every tensor holds float64 data; broadcasting is limited to a
scalar operand against a tensor of any shape.

Example
-------
>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> loss = mean(x * x)
>>> backward(loss)
>>> x.grad
array([1., 2.])
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12

_node_ids = itertools.count()


class AutodiffError(Exception):
    """Base class for errors raised by the engine."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class DomainError(AutodiffError, ValueError):
    pass


class StaleGraphError(AutodiffError, RuntimeError):
    pass


class Tensor:
    """n-dimensional float64 array that records how it was computed.

    Parameters
    ----------
    data : array_like
        Values, converted to a float64 array.
    requires_grad : bool, default=False
        Mark the tensor as trainable. Leaves with ``requires_grad`` receive
        ``grad`` after :func:`backward`.
    name : str, optional
        Label used in error messages (parameter names, for instance).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op: str | None = None
        self._released = False

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return pow(self, exponent)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def log(self, eps: float | None = EPS):
        return log(self, eps=eps)

    def exp(self):
        return exp(self)

    def relu(self):
        return relu(self)

    def detach(self):
        return detach(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, target: Tensor) -> np.ndarray:
    if grad.shape == target.shape:
        return grad
    # scalar operand broadcast against a full tensor
    return np.asarray(grad.sum()).reshape(target.shape)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)

    def back(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _node(a.data + b.data, (a, b), back, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)

    def back(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _node(a.data * b.data, (a, b), back, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), back, "matmul")


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 convolution with zero padding that preserves H and W.

    ``x`` is (B, Cin, H, W), ``weight`` is (Cout, Cin, k, k) with odd k and
    ``bias`` is (Cout,) or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", x.shape, weight.shape)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv2d", weight.shape, bias.shape)
        parents = (x, weight, bias)

    k = kh
    pad = k // 2
    bsz, _, h, w = x.shape
    # channels-last padded copy; columns are k*k shifted slices side by side
    xp = np.zeros((bsz, h + 2 * pad, w + 2 * pad, cin))
    xp[:, pad:pad + h, pad:pad + w, :] = x.data.transpose(0, 2, 3, 1)
    offsets = [(i, j) for i in range(k) for j in range(k)]
    if k == 1:
        cols = xp.reshape(bsz * h * w, cin)
    else:
        cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i, j in offsets], axis=-1)
        cols = cols.reshape(bsz * h * w, k * k * cin)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(bsz, h, w, cout).transpose(0, 3, 1, 2)

    def back(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(bsz * h * w, cout)
        gw = (cols.T @ gflat).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat.T).reshape(bsz, h, w, k * k, cin)
            if k == 1:
                gx = gcols[:, :, :, 0, :].transpose(0, 3, 1, 2)
            else:
                gxp = np.zeros_like(xp)
                for n, (i, j) in enumerate(offsets):
                    gxp[:, i:i + h, j:j + w, :] += gcols[:, :, :, n, :]
                gx = gxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, gflat.sum(axis=0)

    return _node(np.ascontiguousarray(out), parents, back, "conv2d")


def nearest_upsample2x(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("nearest_upsample2x", x.shape)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape

    def back(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), back, "nearest_upsample2x")


def maxpool2x(x) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first maximal entry."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("maxpool2x", x.shape)
    b, c, h, w = x.shape
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(b, c, h, w),)

    return _node(out, (x,), back, "maxpool2x")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _node(x.data * mask, (x,), back, "relu")


def log(x, eps: float | None = EPS) -> Tensor:
    """Natural log; inputs below ``eps`` are clamped (zero gradient there).

    With ``eps=None`` any non-positive input raises :class:`DomainError`.
    """
    x = as_tensor(x)
    if eps is None:
        if np.any(x.data <= 0):
            raise DomainError("log: non-positive input and no epsilon clamp")
        xc = x.data
        active = None
    else:
        active = x.data > eps
        xc = np.where(active, x.data, eps)

    def back(g):
        gx = g / xc
        return (gx if active is None else gx * active,)

    return _node(np.log(xc), (x,), back, "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def back(g):
        return (g * out,)

    return _node(out, (x,), back, "exp")


def pow(x, exponent: float, eps: float | None = EPS) -> Tensor:
    """Elementwise ``x ** exponent`` for a constant real exponent.

    Inputs are clamped at ``eps`` unless the exponent is a non-negative
    integer. With ``eps=None``, non-positive inputs raise
    :class:`DomainError` for exponents that need a positive base.
    """
    x = as_tensor(x)
    exponent = float(exponent)
    integral = exponent.is_integer() and exponent >= 0
    if integral:
        xc, active = x.data, None
    elif eps is None:
        if np.any(x.data <= 0):
            raise DomainError(f"pow: non-positive input with exponent {exponent} and no epsilon clamp")
        xc, active = x.data, None
    else:
        active = x.data > eps
        xc = np.where(active, x.data, eps)
    out = xc ** exponent

    def back(g):
        gx = g * exponent * xc ** (exponent - 1.0)
        return (gx if active is None else gx * active,)

    return _node(out, (x,), back, "pow")


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_channel(x, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), back, "softmax_channel")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack", *[t.shape for t in tensors])
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, back, "stack")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            a != b for d, (a, b) in enumerate(zip(ref, other)) if d != axis % len(ref)
        ):
            raise ShapeError("concat", *[t.shape for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, back, "concat")


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def back(g):
        gx = np.zeros_like(x.data)
        if _basic_index(index):
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _node(np.array(out), (x,), back, "slice")


def _basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def detach(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data.copy())


_FORWARD_OPS = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "nearest_upsample2x": nearest_upsample2x,
    "maxpool2x": maxpool2x,
    "relu": relu,
    "log": log,
    "exp": exp,
    "pow": pow,
    "sum": sum_,
    "mean": mean,
    "softmax_channel": softmax_channel,
    "stack": lambda *ts, **kw: stack(ts, **kw),
    "concat": lambda *ts, **kw: concat(ts, **kw),
    "slice": slice_,
    "detach": detach,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the primitive named ``kind``; see the module functions for arguments."""
    try:
        fn = _FORWARD_OPS[kind]
    except KeyError:
        raise AutodiffError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


def _topological(loss: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack_.extend(p for p in node._parents if p.requires_grad)
    # a node's id is always larger than its inputs' ids
    return sorted(seen.values(), key=lambda t: t.id, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every trainable leaf.

    The graph below ``loss`` is released afterwards; calling this twice on
    the same loss raises :class:`StaleGraphError`.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, ())
    if loss._released:
        raise StaleGraphError("backward called twice on the same graph; re-run forward first")
    if not loss.requires_grad:
        loss._released = True
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for node in order:
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._released = True
    loss._released = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- optimizers


class Adam:
    """Adam with bias correction; moment state persists across steps."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        _require_grads(self.params)
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    """SGD with heavy-ball momentum: ``v = momentum * v + g; p -= lr * v``."""

    def __init__(self, params, lr=1e-2, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        _require_grads(self.params)
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


def _require_grads(params):
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"#{i}"
            raise AutodiffError(f"parameter {label} has no gradient; call zero_grad/backward first")


def adam_step(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, state: Adam | None = None) -> Adam:
    """One Adam update. Pass the returned state back in to continue the run."""
    state = state or Adam(params, lr=lr, betas=betas, eps=eps)
    state.step()
    return state


def sgd_step(params, lr=1e-2, momentum=0.0, state: SGD | None = None) -> SGD:
    state = state or SGD(params, lr=lr, momentum=momentum)
    state.step()
    return state
