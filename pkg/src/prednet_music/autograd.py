"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors use NHWC layout for image data. Every op records its parents and a
closure that maps the upstream gradient to parent gradients; ``backward``
walks the recorded graph once in reverse topological order and then releases
it, so a second call on the same graph is an error.
"""

from __future__ import annotations

import numpy as np

from .errors import PredNetMusicError, ShapeMismatchError


class TapeError(PredNetMusicError):
    code = "tape"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad=None):
        backward(self, grad)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: mul(self, -1.0)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b)
    return a, as_tensor(b, a)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _result(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)  # overflow-free logistic
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data > lo) & (x.data < hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# reductions and channel plumbing


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape, dtype = x.shape, x.dtype
    return _result(
        np.asarray(x.data.mean(dtype=np.float64), dtype=dtype),
        (x,),
        lambda g: (np.full(shape, g / n, dtype=dtype),),
    )


def total(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _result(
        np.asarray(x.data.sum(dtype=np.float64), dtype=dtype),
        (x,),
        lambda g: (np.full(shape, g, dtype=dtype),),
    )


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def take(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Slice ``[start, stop)`` along ``axis``."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = x.shape, x.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), backward_fn)


def split(x: Tensor, parts: int, axis: int = -1):
    size = x.shape[axis]
    if size % parts:
        raise ShapeMismatchError(f"cannot split axis of size {size} into {parts} parts")
    step = size // parts
    return [take(x, k * step, (k + 1) * step, axis) for k in range(parts)]


# --------------------------------------------------------------------------
# spatial ops (NHWC)


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    return np.concatenate(
        [xp[:, i : i + h, j : j + w, :] for i in range(kh) for j in range(kw)], axis=-1
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with zero padding.

    x: (N, H, W, C); weight: (kh, kw, C, O) with odd kh, kw; bias: (O,).
    """
    n, h, w, c = x.shape
    kh, kw, cin, cout = weight.shape
    if cin != c:
        raise ShapeMismatchError(f"conv2d: input has {c} channels, kernel expects {cin}")
    ph, pw = kh // 2, kw // 2
    pad = ((0, 0), (ph, ph), (pw, pw), (0, 0))
    xp_shape = (n, h + 2 * ph, w + 2 * pw, c)
    cols = _im2col(np.pad(x.data, pad), kh, kw, h, w).reshape(-1, kh * kw * c)
    wmat = weight.data.reshape(kh * kw * c, cout)
    out = (cols @ wmat).reshape(n, h, w, cout)
    if bias is not None:
        out += bias.data

    def backward_fn(g):
        g2 = g.reshape(-1, cout)
        grads = []
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, h, w, kh * kw, c)
            dxp = np.zeros(xp_shape, dtype=g.dtype)
            k = 0
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, k, :]
                    k += 1
            grads.append(dxp[:, ph : ph + h, pw : pw + w, :])
        else:
            grads.append(None)
        grads.append((cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None)
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward_fn)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, ceil mode; gradient goes to the first maximal entry."""
    n, h, w, c = x.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    xp = np.pad(
        x.data, ((0, 0), (0, 2 * h2 - h), (0, 2 * w2 - w), (0, 0)), constant_values=-np.inf
    )
    windows = xp.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = np.argmax(windows, axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def backward_fn(g):
        g4 = np.zeros((n, h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(g4, idx, g[..., None], axis=-1)
        full = g4.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        return (full[:, :h, :w, :],)

    return _result(out, (x,), backward_fn)


def upsample2x(x: Tensor, out_hw=None) -> Tensor:
    """Nearest-neighbour 2x upsampling, cropped to ``out_hw`` when given."""
    n, h, w, c = x.shape
    th, tw = out_hw if out_hw is not None else (2 * h, 2 * w)
    if not (2 * h - 1 <= th <= 2 * h and 2 * w - 1 <= tw <= 2 * w):
        raise ShapeMismatchError(f"cannot upsample {h}x{w} to {th}x{tw}")
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)[:, :th, :tw, :]

    def backward_fn(g):
        full = np.zeros((n, 2 * h, 2 * w, c), dtype=g.dtype)
        full[:, :th, :tw, :] = g
        return (full.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _result(out, (x,), backward_fn)


# --------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root._released:
        raise TapeError("backward called twice on the same tape")
    if not root.requires_grad:
        raise TapeError("tensor does not depend on any parameter")
    if grad is None:
        if root.data.size != 1:
            raise TapeError("grad must be given for non-scalar roots")
        grad = np.ones_like(root.data)
    pending = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if node._backward is None:
            if g is not None and not node._released:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        node._backward = None
        node._parents = ()
        node._released = True
