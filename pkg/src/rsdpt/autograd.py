"""Minimal reverse-mode autodiff over numpy arrays.

Only the fused operations a BERT-style encoder needs are provided; each one
records a closure mapping the output gradient to gradients of its inputs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


_grad_enabled = True


@contextmanager
def no_grad():
    """Run operations without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The graph is released afterwards, so a second call on the same loss fails.
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if loss._consumed:
        raise RuntimeError("backward already ran for this loss; run forward again")
    if loss._backward is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise RuntimeError("no recorded forward pass: loss does not depend on any trainable tensor")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents = ()
        node._backward = None
    loss._consumed = True


# elementwise and shape ops ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tensor_sum(a: Tensor) -> Tensor:
    return _result(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _result(y, (a,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# layers -----------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(y, parents, bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table of size {table.shape[0]}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        gg = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv * (
                gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _result(y, (x, gamma, beta), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray, num_heads: int):
    """Multi-head scaled dot-product attention.

    ``q``, ``k``, ``v`` are ``(B, T, H)`` projections; ``key_mask`` is ``(B, T)``
    with 1 for real tokens. Masked keys get exactly zero weight.

    Returns the ``(B, T, H)`` context and the ``(B, A, T, T)`` weights.
    """
    B, T, H = q.shape
    d = H // num_heads
    key_mask = np.asarray(key_mask).astype(bool)
    if not key_mask.any(axis=-1).all():
        raise ValueError("fully masked row: every key is masked for some query")

    def heads(x):
        return x.reshape(B, T, num_heads, d).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q.data), heads(k.data), heads(v.data)
    scale_ = 1.0 / math.sqrt(d)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale_
    scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = (p @ vh).transpose(0, 2, 1, 3).reshape(B, T, H)

    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(B, T, H)

    def bw(g):
        gh = heads(g)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale_
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh
        return merge(gq), merge(gk), merge(gv)

    return _result(ctx, (q, k, v), bw), p


def gather_rows(x: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    """Pick ``x[batch_idx[i], pos_idx[i]]`` from a ``(B, T, H)`` tensor."""
    batch_idx = np.asarray(batch_idx)
    pos_idx = np.asarray(pos_idx)
    if pos_idx.size and (pos_idx.min() < 0 or pos_idx.max() >= x.shape[1]):
        raise IndexError("position out of range")

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch_idx, pos_idx), g)
        return (gx,)

    return _result(x.data[batch_idx, pos_idx], (x,), bw)


# losses -----------------------------------------------------------------------


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("cross-entropy over zero rows")
    lp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -lp[rows, targets].mean()

    def bw(g):
        grad = np.exp(lp)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def binary_cross_entropy_with_logits(z: Tensor, y: np.ndarray) -> Tensor:
    """Mean of ``-[y log s(z) + (1 - y) log(1 - s(z))]``, computed stably."""
    zd = z.data.reshape(-1)
    y = np.asarray(y, dtype=z.dtype).reshape(-1)
    n = len(zd)
    loss = (np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))).mean()

    def bw(g):
        return (((sigmoid(zd) - y) * (g / n)).reshape(z.shape),)

    return _result(np.asarray(loss, dtype=z.dtype), (z,), bw)
