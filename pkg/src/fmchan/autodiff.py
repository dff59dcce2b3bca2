"""Tape-based reverse-mode differentiation for the handful of ops the
velocity network needs.

Feature maps are NHWC ``float64`` arrays.  Every op takes and returns
:class:`Var` handles; with a non-recording tape the ops run as plain numpy
and keep no intermediates.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import StructureError


class Var:
    __slots__ = ("value", "index", "tape")

    def __init__(self, value: np.ndarray, index: int, tape: "Tape"):
        self.value = value
        self.index = index
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Tape:
    """Append-only record of primitive ops.

    ``nodes[i]`` is ``(parent_indices, vjp)`` where ``vjp`` maps the output
    adjoint to a tuple of input adjoints.  Leaves have ``vjp is None``.
    Indices grow monotonically, so the list is already in topological order.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[tuple[tuple[int, ...], Callable | None]] = []

    def leaf(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not self.record:
            return Var(value, -1, self)
        self.nodes.append(((), None))
        return Var(value, len(self.nodes) - 1, self)

    def push(self, value: np.ndarray, parents: Sequence[Var], vjp: Callable) -> Var:
        if not self.record:
            return Var(value, -1, self)
        self.nodes.append((tuple(p.index for p in parents), vjp))
        return Var(value, len(self.nodes) - 1, self)

    def backward(self, loss: Var) -> list:
        """Adjoints of ``loss`` for every node (``None`` where unreached)."""
        if not self.record:
            raise StructureError("cannot differentiate through a non-recording tape")
        if loss.tape is not self:
            raise StructureError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise StructureError(f"loss must be scalar, got shape {loss.value.shape}")
        adj: list = [None] * len(self.nodes)
        adj[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = adj[i]
            parents, vjp = self.nodes[i]
            if g is None or vjp is None:
                continue
            for p, gp in zip(parents, vjp(g)):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return adj

    def grad(self, adjoints: list, var: Var) -> np.ndarray:
        g = adjoints[var.index]
        return np.zeros_like(var.value) if g is None else g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Var, b: Var) -> Var:
    sa, sb = a.value.shape, b.value.shape
    return a.tape.push(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Var, b: Var) -> Var:
    sa, sb = a.value.shape, b.value.shape
    return a.tape.push(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape.push(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, c: float) -> Var:
    return a.tape.push(a.value * c, (a,), lambda g: (g * c,))


def total(a: Var) -> Var:
    """Sum of all entries."""
    shape = a.value.shape
    return a.tape.push(np.asarray(a.value.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_squares(a: Var) -> Var:
    av = a.value
    return a.tape.push(np.asarray(np.sum(av * av)), (a,), lambda g: (2.0 * g * av,))


def silu(a: Var) -> Var:
    x = a.value
    s = 0.5 * (1.0 + np.tanh(0.5 * x))  # logistic sigmoid without exp overflow
    return a.tape.push(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def dense(x: Var, w: Var, b: Var) -> Var:
    """``x @ w + b`` for ``x`` of shape (B, in) and ``w`` of shape (in, out)."""
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0]:
        raise StructureError(f"dense input {xv.shape} vs weight {wv.shape}")
    out = xv @ wv + b.value
    return x.tape.push(out, (x, w, b),
                       lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    if k == 1:
        return xp
    return np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(k) for j in range(k)],
                          axis=-1)


def conv2d(x: Var, w: Var, b: Var) -> Var:
    """Stride-1 'same' convolution; ``w`` has shape (k, k, c_in, c_out), k odd."""
    xv, wv = x.value, w.value
    k, _, c_in, c_out = wv.shape
    if xv.ndim != 4 or xv.shape[-1] != c_in:
        raise StructureError(f"conv input {xv.shape} vs kernel {wv.shape}")
    n, h, wd, _ = xv.shape
    p = k // 2
    xp = np.pad(xv, ((0, 0), (p, p), (p, p), (0, 0))) if p else xv
    cols = _im2col(xp, k, h, wd).reshape(-1, k * k * c_in)
    w2 = wv.reshape(k * k * c_in, c_out)
    out = (cols @ w2).reshape(n, h, wd, c_out) + b.value
    if not x.tape.record:
        return Var(out, -1, x.tape)

    def vjp(g):
        g2 = g.reshape(-1, c_out)
        gw = (cols.T @ g2).reshape(wv.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ w2.T).reshape(n, h, wd, k * k, c_in)
        if k == 1:
            return gcols[..., 0, :], gw, gb
        gxp = np.zeros_like(xp)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gxp[:, i:i + h, j:j + wd, :] += gcols[..., idx, :]
        return gxp[:, p:-p, p:-p, :], gw, gb

    return x.tape.push(out, (x, w, b), vjp)


def avgpool2(x: Var) -> Var:
    xv = x.value
    n, h, w, c = xv.shape
    if h % 2 or w % 2:
        raise StructureError(f"cannot 2x2-pool spatial dims {(h, w)}")
    out = xv.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return x.tape.push(out, (x,), vjp)


def upsample2(x: Var) -> Var:
    xv = x.value
    n, h, w, c = xv.shape
    out = np.repeat(np.repeat(xv, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return x.tape.push(out, (x,), vjp)


def concat(a: Var, b: Var) -> Var:
    """Concatenate along the channel (last) axis."""
    ca = a.value.shape[-1]
    out = np.concatenate([a.value, b.value], axis=-1)
    return a.tape.push(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]))


def add_channel_bias(x: Var, e: Var) -> Var:
    """Add a per-example channel vector ``e`` (B, C) to every pixel of ``x``."""
    if e.value.shape != (x.value.shape[0], x.value.shape[-1]):
        raise StructureError(f"bias {e.value.shape} does not fit feature map {x.value.shape}")
    out = x.value + e.value[:, None, None, :]
    return x.tape.push(out, (x, e), lambda g: (g, g.sum(axis=(1, 2))))
