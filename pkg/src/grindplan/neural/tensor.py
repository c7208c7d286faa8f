"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus a gradient buffer and a backward closure;
backward() runs the closures in reverse topological order. Float32 is the
working precision; float64 is supported so finite-difference oracles can run
at full precision. Non-finite values raise instead of propagating silently.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("cannot wrap a Tensor in a Tensor")
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    # construction helper for op results
    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(p for p in parents if p.requires_grad) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(np.asarray(grad, dtype=self.data.dtype), self.data.shape)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # ---- graph traversal ----

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor that requires no grad")
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in backward root")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward without explicit grad needs a scalar")
            grad = np.ones_like(self.data)
        # iterative reverse topological order
        order, seen, stack = [], set(), [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- arithmetic ----

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            a.requires_grad and a._accumulate(g)
            b.requires_grad and b._accumulate(g)

        return Tensor._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._result(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            a.requires_grad and a._accumulate(g * b.data)
            b.requires_grad and b._accumulate(g * a.data)

        return Tensor._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            a.requires_grad and a._accumulate(g / b.data)
            b.requires_grad and b._accumulate(-g * a.data / (b.data * b.data))

        return Tensor._result(a.data / b.data, (a, b), backward)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        out_data = a.data ** exponent

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1))

        return Tensor._result(out_data, (a,), backward)

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim != 2:
            raise ValueError(f"matmul expects (.., m, k) @ (k, n), got {a.shape} @ {b.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                ga = a.data.reshape(-1, a.data.shape[-1])
                gg = g.reshape(-1, g.shape[-1])
                b._accumulate(ga.T @ gg)

        return Tensor._result(a.data @ b.data, (a, b), backward)

    __matmul__ = matmul

    # ---- shape ops ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor._result(a.data.reshape(shape), (a,),
                              lambda g: a._accumulate(g.reshape(old)))

    def transpose(self, *axes):
        a = self
        if not axes:
            axes = tuple(reversed(range(a.data.ndim)))
        inverse = np.argsort(axes)
        return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                              lambda g: a._accumulate(g.transpose(inverse)))

    def __getitem__(self, idx):
        a = self

        def backward(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

        return Tensor._result(a.data[idx], (a,), backward)

    # ---- reductions and elementwise ----

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape))

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._result(out_data, (a,), lambda g: a._accumulate(g * out_data))

    def log(self):
        a = self
        return Tensor._result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        return Tensor._result(out_data, (a,), lambda g: a._accumulate(g * 0.5 / out_data))

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)
        return Tensor._result(out_data, (a,), lambda g: a._accumulate(g * (1.0 - out_data**2)))

    def sigmoid(self):
        a = self
        out_data = _sigmoid(a.data)
        return Tensor._result(out_data, (a,),
                              lambda g: a._accumulate(g * out_data * (1.0 - out_data)))

    def silu(self):
        a = self
        sig = _sigmoid(a.data)

        def backward(g):
            a._accumulate(g * sig * (1.0 + a.data * (1.0 - sig)))

        return Tensor._result(a.data * sig, (a,), backward)

    def mish(self):
        # x * tanh(softplus(x)); softplus computed stably
        a = self
        sp = np.logaddexp(0.0, a.data)
        tsp = np.tanh(sp)
        sig = _sigmoid(a.data)

        def backward(g):
            a._accumulate(g * (tsp + a.data * (1.0 - tsp**2) * sig))

        return Tensor._result(a.data * tsp, (a,), backward)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def concat(tensors: list, axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parents = tuple(tensors)

    def backward(g):
        for t, lo, hi in zip(parents, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._result(data, parents, backward)


def repeat_upsample(t: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling along the last axis."""
    a = t
    out_data = np.repeat(a.data, factor, axis=-1)

    def backward(g):
        shape = g.shape[:-1] + (g.shape[-1] // factor, factor)
        a._accumulate(g.reshape(shape).sum(axis=-1))

    return Tensor._result(out_data, (a,), backward)
