"""Query-conditioned conv-LSTM search cell, attention head and subregion scoring.

Gate order inside fused kernels is (input, forget, output, candidate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .geometry import BBox, Region
from .tensor import Tensor

GATES = ("i", "f", "o", "c")


def nsn_param_shapes(D: int) -> dict:
    shapes = {}
    for g in GATES:
        for src in ("x", "h", "q"):
            shapes[f"nsn.w_{src}{g}"] = (3, 3, D, D)
        shapes[f"nsn.b_{g}"] = (D,)
    shapes["nsn.w_qa"] = (3, 3, D, D)
    shapes["nsn.w_ha"] = (3, 3, D, D)
    shapes["nsn.b_a"] = (D,)
    shapes["nsn.w_z"] = (1, 1, D, 1)
    shapes["nsn.w_s"] = (1, 1, D, 2)
    shapes["nsn.b_s"] = (2,)
    return shapes


def no_context_param_shapes(D: int) -> dict:
    """Replacement of the recurrent cell by one conv over [q, x_t] (no memory across steps)."""
    shapes = {"ctx.w_cat": (3, 3, 2 * D, D), "ctx.b_cat": (D,)}
    for k in ("nsn.w_qa", "nsn.w_ha", "nsn.b_a", "nsn.w_z", "nsn.w_s", "nsn.b_s"):
        shapes[k] = nsn_param_shapes(D)[k]
    return shapes


def no_attention_param_shapes(D: int, K: int, hidden: int) -> dict:
    """Two FC layers scoring each candidate subregion from [q, x_sub]."""
    return {"mlp.w1": (2 * K * K * D, hidden), "mlp.b1": (hidden,),
            "mlp.w2": (hidden, 2), "mlp.b2": (2,)}


@dataclass
class NSNState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, K: int, D: int, dtype=np.float64) -> "NSNState":
        return cls(Tensor(np.zeros((K, K, D), dtype)), Tensor(np.zeros((K, K, D), dtype)))


@dataclass
class AttentionMap:
    z: Tensor  # K x K logits
    l: Tensor  # K x K softmax over all locations

    def scores(self) -> np.ndarray:
        return self.l.data


class QueryContext:
    """Step-invariant work for one search episode: fused kernels and the q-driven terms.

    Holding q here is what makes it identical at every step of an episode.
    """

    def __init__(self, q: Tensor, params: dict, variant: str = "full"):
        self.q = q
        self.variant = variant
        if variant == "full":
            self.w_x = ops.concat([params[f"nsn.w_x{g}"] for g in GATES], axis=3)
            self.w_h = ops.concat([params[f"nsn.w_h{g}"] for g in GATES], axis=3)
            w_q = ops.concat([params[f"nsn.w_q{g}"] for g in GATES], axis=3)
            b = ops.concat([params[f"nsn.b_{g}"] for g in GATES], axis=0)
            self.q_gates = ops.conv2d(q, w_q, b)
        if variant in ("full", "no_context"):
            self.q_att = ops.conv2d(q, params["nsn.w_qa"], params["nsn.b_a"])


def nsn_step(x_t: Tensor, q: Tensor, state: NSNState, params: dict, ctx: QueryContext | None = None) -> NSNState:
    """One step of the query-gated conv-LSTM.

    i, f, o = sigmoid(w_x* x_t + w_h* h + w_q* q + b); g = tanh(...);
    c' = f . c + i . g; h' = o . tanh(c').
    """
    if x_t.shape != q.shape or state.h.shape != q.shape or state.c.shape != q.shape:
        raise ops.DimensionError(
            f"nsn_step: x_t {x_t.shape}, q {q.shape}, h {state.h.shape}, c {state.c.shape} must all match")
    if ctx is None:
        ctx = QueryContext(q, params)
    elif ctx.q is not q:
        raise ValueError("nsn_step: q differs from the episode's primitive memory")
    D = q.shape[2]
    pre = ops.add(ops.conv2d(x_t, ctx.w_x), ops.conv2d(state.h, ctx.w_h), ctx.q_gates)
    i = ops.sigmoid(ops.channels(pre, 0, D))
    f = ops.sigmoid(ops.channels(pre, D, 2 * D))
    o = ops.sigmoid(ops.channels(pre, 2 * D, 3 * D))
    g = ops.tanh(ops.channels(pre, 3 * D, 4 * D))
    c = ops.add(ops.mul(f, state.c), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    return NSNState(h, c)


def no_context_step(x_t: Tensor, q: Tensor, params: dict) -> NSNState:
    """Stateless replacement cell: h = tanh(conv([q, x_t]))."""
    h = ops.tanh(ops.conv2d(ops.concat([q, x_t], axis=2), params["ctx.w_cat"], params["ctx.b_cat"]))
    return NSNState(h, h)


def attention(q: Tensor, h_t: Tensor, params: dict, ctx: QueryContext | None = None) -> AttentionMap:
    """z = w_z * tanh(w_qa * q + w_ha * h + b_a); l = softmax over all K x K cells."""
    if q.shape != h_t.shape:
        raise ops.DimensionError(f"attention: q {q.shape} vs h {h_t.shape}")
    q_att = ctx.q_att if ctx is not None else ops.conv2d(q, params["nsn.w_qa"], params["nsn.b_a"])
    a = ops.tanh(ops.add(q_att, ops.conv2d(h_t, params["nsn.w_ha"])))
    K = h_t.shape[0]
    z = ops.reshape(ops.conv2d(a, params["nsn.w_z"]), (K, K))
    return AttentionMap(z, ops.softmax2d(z))


def subregion_score(l, rect: tuple[int, int, int, int]) -> float:
    """Mean attention over grid rows [r0, r1) x cols [c0, c1)."""
    r0, r1, c0, c1 = rect
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"empty subregion rectangle {rect}")
    arr = l.scores() if isinstance(l, AttentionMap) else (l.data if isinstance(l, Tensor) else np.asarray(l))
    K1, K2 = arr.shape
    if r0 < 0 or c0 < 0 or r1 > K1 or c1 > K2:
        raise ValueError(f"subregion {rect} outside the {K1}x{K2} grid")
    return float(arr[r0:r1, c0:c1].mean())


_SNAP = 1e-9


def map_subregion_to_grid(parent: Region, sub: Region, K: int) -> tuple[int, int, int, int]:
    """Affine map of ``sub.cover`` into the parent's K x K grid, rounded outward.

    Returns half-open (r0, r1, c0, c1); always at least one cell.
    """
    p, s = parent.cover, sub.cover
    tol = 1e-6 * max(p.width, p.height, 1.0)
    if s.x1 < p.x1 - tol or s.y1 < p.y1 - tol or s.x2 > p.x2 + tol or s.y2 > p.y2 + tol:
        raise ValueError(f"subregion {tuple(s)} is not inside parent {tuple(p)}")

    def axis(lo, hi, plo, span):
        a = math.floor((lo - plo) / span * K + _SNAP)
        b = math.ceil((hi - plo) / span * K - _SNAP)
        a = min(max(a, 0), K - 1)
        b = min(max(b, a + 1), K)
        return a, b

    r0, r1 = axis(s.y1, s.y2, p.y1, p.height)
    c0, c1 = axis(s.x1, s.x2, p.x1, p.width)
    return r0, r1, c0, c1


def grid_rect_to_image(parent: Region, rect: tuple[int, int, int, int], K: int):
    """Inverse of :func:`map_subregion_to_grid` (cell edges back to pixels)."""
    r0, r1, c0, c1 = rect
    p = parent.cover
    return BBox(p.x1 + c0 / K * p.width, p.y1 + r0 / K * p.height,
                p.x1 + c1 / K * p.width, p.y1 + r1 / K * p.height)
