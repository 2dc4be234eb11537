"""Dense tape-based reverse-mode autodiff over numpy arrays.

Just enough operators for a decoder-only transformer. Every op appends a
node to the active :class:`Tape`; ``Tape.backward`` walks it in reverse.
"""
from __future__ import annotations

import math
import threading
from typing import Callable

import numpy as np


class Tape:
    def __init__(self):
        self.nodes: list[tuple[Tensor | None, Callable[[], None]]] = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1:
            raise ValueError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.nodes):
            if out is None or out.grad is not None:
                fn()


# each thread records onto its own tapes so simulated ranks can run in parallel
_LOCAL = threading.local()


def _tapes() -> list[Tape]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


def _record(out: "Tensor | None", fn: Callable[[], None]) -> "Tensor | None":
    stack = _tapes()
    if stack:
        stack[-1].nodes.append((out, fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def _acc(self, g: np.ndarray):
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data + other.data)

        def back():
            self._acc(_unbroadcast(out.grad, self.shape))
            other._acc(_unbroadcast(out.grad, other.shape))

        return _record(out, back)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data @ other.data)

        def back():
            g = out.grad
            self._acc(_unbroadcast(g @ np.swapaxes(other.data, -1, -2), self.shape))
            if other.data.ndim == 2:
                # weight matrix: contract over all leading axes in one GEMM
                a = self.data.reshape(-1, self.shape[-1])
                other._acc(a.T @ g.reshape(-1, g.shape[-1]))
            else:
                other._acc(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, other.shape))

        return _record(out, back)

    def scale(self, c: float) -> "Tensor":
        out = Tensor(self.data * self.data.dtype.type(c))

        def back():
            self._acc(out.grad * self.data.dtype.type(c))

        return _record(out, back)

    def reshape(self, *shape) -> "Tensor":
        out = Tensor(self.data.reshape(*shape))

        def back():
            self._acc(out.grad.reshape(self.shape))

        return _record(out, back)

    def transpose(self, *axes) -> "Tensor":
        out = Tensor(self.data.transpose(*axes))
        inverse = np.argsort(axes)

        def back():
            self._acc(out.grad.transpose(*inverse))

        return _record(out, back)

    def split(self, sections: int, axis: int = -1) -> list["Tensor"]:
        outs = [Tensor(p) for p in np.split(self.data, sections, axis=axis)]

        def back():
            if all(o.grad is None for o in outs):
                return
            grads = [o.grad if o.grad is not None else np.zeros_like(o.data) for o in outs]
            self._acc(np.concatenate(grads, axis=axis))

        _record(None, back)
        return outs


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    out = Tensor(table.data[ids])

    def back():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        table._acc(g)

    return _record(out, back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * rstd
    out = Tensor(xhat * gamma.data + beta.data)

    def back():
        g = out.grad
        gamma._acc(_unbroadcast(g * xhat, gamma.shape))
        beta._acc(_unbroadcast(g, beta.shape))
        gx = g * gamma.data
        d = x.data.shape[-1]
        dx = rstd / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        x._acc(dx)

    return _record(out, back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation, as in GPT-2."""
    a = x.data
    dt = a.dtype.type
    u = dt(_GELU_C) * (a + dt(0.044715) * a * a * a)
    t = np.tanh(u)
    out = Tensor(dt(0.5) * a * (1 + t))

    def back():
        du = dt(_GELU_C) * (1 + dt(3 * 0.044715) * a * a)
        local = dt(0.5) * (1 + t) + dt(0.5) * a * (1 - t * t) * du
        x._acc(out.grad * local)

    return _record(out, back)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with positions ``j > i`` masked out."""
    T = scores.shape[-1]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    z = np.where(mask, -np.inf, scores.data)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p.astype(scores.data.dtype, copy=False))

    def back():
        g = out.grad
        scores._acc(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _record(out, back)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    z = logits.data.reshape(-1, logits.shape[-1])
    t = np.asarray(targets).reshape(-1)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(t.size)
    out = Tensor(np.asarray(-logp[rows, t].mean(), dtype=logits.data.dtype))

    def back():
        p = np.exp(logp)
        p[rows, t] -= 1
        logits._acc((p * (out.grad / t.size)).reshape(logits.shape))

    return _record(out, back)
