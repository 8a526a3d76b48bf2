"""A small graph-based reverse-mode autodiff engine over float64 numpy arrays.

Each op records its parents and a closure mapping the output gradient to one
gradient per parent.  ``Tensor.backward`` walks the graph in reverse
topological order and accumulates into ``Parameter.grad``.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "_parents", "_backward", "requires_grad")
    __array_priority__ = 100  # make ndarray (op) Tensor defer to us

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = False
        self._parents = ()
        self._backward = None
        if parents and _GRAD_ENABLED and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = parents
            self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        return power(self, k)

    def __matmul__(self, other):
        return bmm(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return total(self)

    def __getitem__(self, idx):
        return take(self, idx)

    # reverse pass ---------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if isinstance(node, Parameter):
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    __slots__ = ("name", "grad")

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64))
        self.name = name
        self.requires_grad = True
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# primitive ops --------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return Tensor(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def power(a, k: int):
    if k == 0:
        return Tensor(np.ones_like(a.data))
    return Tensor(a.data**k, (a,), lambda g: (g * k * a.data ** (k - 1),))


def sigmoid(a):
    x = np.asarray(a.data, dtype=np.float64)
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a):
    mask = a.data > 0
    return Tensor(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def total(a):
    shape = a.shape
    return Tensor(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def take(a, idx):
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return Tensor(a.data[idx], (a,), back)


def reshape(a, shape):
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def bmm(a, b):
    """Matmul over matching leading batch dims (no broadcasting across them)."""
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor(a.data @ b.data, (a, b), back)


def linear(x, W, b=None):
    """Affine map over the last axis: ``x @ W + b``."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])   # one 2-D GEMM instead of a batched loop
    out = (x2 @ W.data).reshape(*lead, W.shape[1])
    if b is not None:
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ W.data.T).reshape(*lead, W.shape[0]) if x.requires_grad else None
        gW = x2.T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return Tensor(out, parents, back)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    x = as_tensor(x)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm: width {x.shape[-1]} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def back(g):
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        dx = None
        if x.requires_grad:
            dy = g * gain.data
            dx = rstd * (dy - dy.mean(axis=-1, keepdims=True)
                         - xhat * (dy * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return Tensor(out, (x, gain, bias), back)


def softmax(x, mask=None):
    """Softmax over the last axis; ``mask`` (bool, True = keep) zeroes entries."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor(y, (x,), back)


def dropout_mask(x, mask: np.ndarray):
    return Tensor(x.data * mask, (x,), lambda g: (g * mask,))


def embedding(ids: np.ndarray, table):
    ids = np.asarray(ids)
    rows = table.shape[0]

    def back(g):
        gt = np.zeros((rows, g.shape[-1]))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return Tensor(table.data[ids], (table,), back)


def cross_entropy(logits, targets: np.ndarray):
    """Mean token-level negative log-likelihood."""
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    rows = np.arange(len(t))
    loss = (np.log(s[:, 0]) + zmax[:, 0] - z[rows, t]).mean()
    shape = logits.shape

    def back(g):
        p = e / s
        p[rows, t] -= 1.0
        return ((p * (g / len(t))).reshape(shape),)

    return Tensor(loss, (logits,), back)
