"""Dense numpy tensors with tape-based reverse-mode differentiation.

Every op builds a new :class:`Tensor` holding a closure that pushes the
output gradient back into its parents. :func:`backward` walks the graph in
reverse topological order. Ops are coarse (a whole convolution or batch norm
is one node) so the Python overhead per training step stays small.
"""

from __future__ import annotations

import numpy as np


class NumericalError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised when backward is asked for something the tape cannot provide."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward) -> Tensor:
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a: Tensor, c) -> Tensor:
    """Divide by a constant (true division, not multiplication by 1/c)."""
    return _node(a.data / c, (a,), lambda g: _accum(a, g / c))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: _accum(a, g * out))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: _accum(a, g * mask))


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, but no gradient ever flows back through the result."""
    return Tensor(a.data)


# ----------------------------------------------------------------- reductions

def seq_sum(x: np.ndarray, axis=None) -> np.ndarray:
    """Sum accumulated strictly left to right along ``axis``.

    numpy's own ``sum`` uses pairwise blocks, so its rounding depends on the
    array length; a running accumulation makes every reduction reproducible
    by a plain scalar loop.
    """
    x = np.asarray(x)
    if axis is None:
        x, axis = x.reshape(-1), 0
    elif isinstance(axis, tuple):
        axes = tuple(a % x.ndim for a in axis)
        keep = [d for d in range(x.ndim) if d not in axes]
        x = x.transpose(list(axes) + keep).reshape((-1,) + tuple(x.shape[d] for d in keep))
        axis = 0
    if x.shape[axis] == 0:
        return np.zeros(np.delete(x.shape, axis), dtype=x.dtype)
    return np.take(np.add.accumulate(x, axis=axis), -1, axis=axis)


def sum_(a: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _node(np.asarray(seq_sum(a.data, axis)), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return div(sum_(a, axis), n)


# -------------------------------------------------------------------- shaping

def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def take(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        if isinstance(idx, slice):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _node(a.data[idx], (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            _accum(t, part)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------- softmax & losses

def _check_2d(x):
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D (n, k) array, got shape {x.shape}")


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of an (n, k) array; returns a plain ndarray (no tape)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    _check_2d(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / seq_sum(e, axis=1)[:, None]


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data
    _check_2d(z)
    shifted = z - z.max(axis=1, keepdims=True)
    out = shifted - np.log(seq_sum(np.exp(shifted), axis=1))[:, None]

    def bw(g):
        _accum(logits, g - np.exp(out) * g.sum(axis=1, keepdims=True))

    return _node(out, (logits,), bw)


def cross_entropy_rows(target_rows, logits: Tensor) -> Tensor:
    """Per-row H(p, softmax(z)) = -sum_j p_j log softmax(z)_j, shape (n,)."""
    target_rows = as_tensor(target_rows, dtype=logits.dtype)
    if target_rows.shape != logits.shape:
        raise ValueError(f"target shape {target_rows.shape} != logits shape {logits.shape}")
    return -sum_(target_rows * log_softmax(logits), axis=1)


def cross_entropy(target_rows, logits: Tensor) -> Tensor:
    """Mean over rows of the cross-entropy between target distributions and logits."""
    return mean(cross_entropy_rows(target_rows, logits))


# --------------------------------------------------------------------- tape

def _toposort(root: Tensor):
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def check_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


def backward_tensor(loss: Tensor, leaves=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise GraphError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no recorded computation reaches a trainable tensor")
    check_finite(loss.data, "loss")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior gradients are not needed once pushed to parents
            node.grad = None
