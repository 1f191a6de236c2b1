"""Tape-free reverse-mode autodiff over numpy arrays.

Policy code is written once against the helpers below; fed plain ndarrays it
runs as ordinary (batched) numpy, fed ``Var`` leaves it records a graph that
``backward`` differentiates.
"""
import numpy as np


class Var:
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self._backward = backward
        self.grad = None

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self):
        return f"Var({self.value!r})"

    def __add__(self, other):
        other = _lift(other)
        return Var(self.value + other.value, (self, other),
                   lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Var(a * b, (self, other),
                   lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Var(a / b, (self, other),
                   lambda g: (_unbroadcast(g / b, self.shape), _unbroadcast(-g * a / b**2, other.shape)))

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __pow__(self, k):
        a = self.value
        return Var(a**k, (self,), lambda g: (g * k * a ** (k - 1),))

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        if a.ndim != 2 and a.ndim != 1 or b.ndim != 2:
            raise ValueError("matmul supports (n,k)@(k,m) and (k,)@(k,m) only")

        def back(g):
            if a.ndim == 1:
                return g @ b.T, np.outer(a, g)
            return g @ b.T, a.T @ g

        return Var(a @ b, (self, other), back)

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Var(self.value[idx], (self,), back)

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Var(self.value.sum(axis=axis, keepdims=keepdims), (self,), back)

    def reshape(self, *shape):
        old = self.shape
        return Var(self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def backward(self, seed=None):
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                v, done = stack.pop()
                if done:
                    order.append(v)
                    continue
                if id(v) in seen:
                    continue
                seen.add(id(v))
                stack.append((v, True))
                for p in v.parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads = {id(self): np.ones(self.shape) if seed is None else np.asarray(seed, float)}
        for v in reversed(order):
            g = grads.pop(id(v), None)
            if g is None:
                continue
            if v._backward is None:
                v.grad = g if v.grad is None else v.grad + g
                continue
            for p, pg in zip(v.parents, v._backward(g)):
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = np.array(pg, dtype=float)


def _lift(x):
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    y = np.tanh(x.value)
    return Var(y, (x,), lambda g: (g * (1 - y**2),))


def sqrt(x):
    if not isinstance(x, Var):
        return np.sqrt(x)
    y = np.sqrt(x.value)
    return Var(y, (x,), lambda g: (g / (2 * y),))


def exp(x):
    if not isinstance(x, Var):
        return np.exp(x)
    y = np.exp(x.value)
    return Var(y, (x,), lambda g: (g * y,))


def log(x):
    if not isinstance(x, Var):
        return np.log(x)
    a = x.value
    return Var(np.log(a), (x,), lambda g: (g / a,))


def stack(items, axis=-1):
    if not any(isinstance(i, Var) for i in items):
        return np.stack(np.broadcast_arrays(*items), axis=axis)
    items = [_lift(i) for i in items]
    shape = np.broadcast_shapes(*(i.shape for i in items))
    vals = [np.broadcast_to(i.value, shape) for i in items]
    out = np.stack(vals, axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis

    def back(g):
        return tuple(_unbroadcast(np.take(g, k, axis=ax), i.shape) for k, i in enumerate(items))

    return Var(out, tuple(items), back)


def concatenate(items, axis=-1):
    if not any(isinstance(i, Var) for i in items):
        return np.concatenate(items, axis=axis)
    items = [_lift(i) for i in items]
    out = np.concatenate([i.value for i in items], axis=axis)
    bounds = np.cumsum([0] + [i.shape[axis] for i in items])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(items)))

    return Var(out, tuple(items), back)


def logsumexp(x, axis=-1):
    m = np.max(value(x), axis=axis, keepdims=True)
    s = exp(x - m).sum(axis=axis)
    return log(s) + np.squeeze(m, axis=axis)
