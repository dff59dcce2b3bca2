"""Central finite-difference checks for the autodiff ops.

The numerical side only ever evaluates forward values, so it stays an
independent oracle for the tape's reverse pass.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .tensor import Rng


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entrywise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``1e-6 * max(1, max|n|)`` so entries that are zero up to
    round-off do not dominate.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    floor = 1e-6 * max(1.0, float(np.max(np.abs(n))) if n.size else 1.0)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``x`` (mutated in place, restored)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def check_op(op: Callable[..., ad.Var], inputs: Sequence[np.ndarray], rng: Rng,
             h: float = 1e-4) -> float:
    """Max relative error of ``op``'s VJP against finite differences.

    The scalar under test is ``sum(op(*inputs) * R)`` for a fixed random
    projection ``R``.
    """
    inputs = [np.array(v, dtype=np.float64) for v in inputs]
    tape = ad.Tape(record=False)
    out_shape = op(*[tape.leaf(v) for v in inputs]).value.shape
    proj = rng.normal(out_shape)

    def value() -> float:
        t = ad.Tape(record=False)
        return float(np.sum(op(*[t.leaf(v) for v in inputs]).value * proj))

    tape = ad.Tape()
    leaves = [tape.leaf(v) for v in inputs]
    loss = ad.total(ad.mul(op(*leaves), tape.leaf(proj)))
    adj = tape.backward(loss)
    worst = 0.0
    for leaf, v in zip(leaves, inputs):
        num = numeric_grad(value, v, h)
        worst = max(worst, rel_error(tape.grad(adj, leaf), num))
    return worst


def _shape(r, lo=1, hi=4, n=4):
    return tuple(int(v) for v in r.integers(hi - lo + 1, n) + lo)


def _conv_case(r, k):
    b, hh, ww = (int(v) + 1 for v in r.integers(4, 3))
    ci, co = (int(v) + 1 for v in r.integers(3, 2))
    return [r.normal((b, hh, ww, ci)), r.normal((k, k, ci, co)), r.normal(co)]


# Op catalogue for gradient gates: name -> (op, input factory taking an Rng).
OP_CASES = {
    "add": (ad.add, lambda r: [r.normal(s := _shape(r)), r.normal(s)]),
    "add_broadcast": (ad.add, lambda r: [r.normal((3, 4)), r.normal(4)]),
    "sub": (ad.sub, lambda r: [r.normal(s := _shape(r)), r.normal(s)]),
    "mul": (ad.mul, lambda r: [r.normal(s := _shape(r)), r.normal(s)]),
    "scale": (lambda a: ad.scale(a, -1.7), lambda r: [r.normal(_shape(r))]),
    "total": (ad.total, lambda r: [r.normal(_shape(r))]),
    "sum_squares": (ad.sum_squares, lambda r: [r.normal(_shape(r))]),
    "silu": (ad.silu, lambda r: [2 * r.normal(_shape(r))]),
    "dense": (ad.dense, lambda r: [r.normal((3, 5)), r.normal((5, 4)), r.normal(4)]),
    "conv3": (ad.conv2d, lambda r: _conv_case(r, 3)),
    "conv1": (ad.conv2d, lambda r: _conv_case(r, 1)),
    "avgpool2": (ad.avgpool2, lambda r: [r.normal((2, 4, 6, 3))]),
    "upsample2": (ad.upsample2, lambda r: [r.normal((2, 2, 3, 3))]),
    "concat": (ad.concat, lambda r: [r.normal((2, 2, 2, 3)), r.normal((2, 2, 2, 1))]),
    "channel_bias": (ad.add_channel_bias, lambda r: [r.normal((2, 3, 2, 4)), r.normal((2, 4))]),
}
