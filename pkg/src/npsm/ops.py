"""Differentiable primitives over :class:`~npsm.tensor.Tensor`.

Layouts are explicit: feature maps are ``H x W x C`` and conv kernels are
``kh x kw x Cin x Cout``. There is no broadcasting apart from a per-channel
bias in :func:`conv2d` and :func:`linear`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, record


class DimensionError(ValueError):
    """Raised when operand shapes do not line up."""


def _same_shape(opname, *ts):
    s0 = ts[0].shape
    for k, t in enumerate(ts[1:], 1):
        if t.shape != s0:
            bad = [ax for ax in range(max(len(s0), len(t.shape)))
                   if ax >= len(s0) or ax >= len(t.shape) or s0[ax] != t.shape[ax]]
            raise DimensionError(f"{opname}: operand 0 has shape {s0}, operand {k} has {t.shape} (axes {bad} differ)")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(*ts: Tensor) -> Tensor:
    _same_shape("add", *ts)
    data = ts[0].data
    for t in ts[1:]:
        data = data + t.data
    out = Tensor(data)
    return record(out, ts, lambda g: [g] * len(ts))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _same_shape("hadamard", a, b)
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data if a.requires_grad else None,
                                          g * a.data if b.requires_grad else None))


hadamard = mul


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c))
    return record(out, (a,), lambda g: (g * a.data.dtype.type(c),))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    out = Tensor(s, check=False)
    return record(out, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, check=False)
    return record(out, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(a.data * mask, check=False)
    return record(out, (a,), lambda g: (g * mask,))


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch by name: ``sigmoid``, ``tanh``, ``hadamard`` or ``add``."""
    table = {"sigmoid": sigmoid, "tanh": tanh, "hadamard": mul, "add": add}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), check=False)
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (-1,))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(ts)
    ax = axis % ts[0].data.ndim
    for t in ts[1:]:
        if t.data.ndim != ts[0].data.ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.data.ndim) if i != ax
        ):
            raise DimensionError(f"concat: shapes {[x.shape for x in ts]} disagree off axis {ax}")
    sizes = [t.shape[ax] for t in ts]
    out = Tensor(np.concatenate([t.data for t in ts], axis=ax), check=False)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        sl = [slice(None)] * g.ndim
        res = []
        for k in range(len(ts)):
            sl[ax] = slice(bounds[k], bounds[k + 1])
            res.append(g[tuple(sl)])
        return res

    return record(out, ts, back)


def channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[..., start:stop]`` of the last axis."""
    out = Tensor(a.data[..., start:stop], check=False)

    def back(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return record(out, (a,), back)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum()), check=False)
    return record(out, (a,), lambda g: (np.full(a.shape, g, dtype=a.data.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean()), check=False)
    return record(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))


def global_avg_pool(a: Tensor) -> Tensor:
    """``H x W x D`` -> ``D``."""
    if a.data.ndim != 3:
        raise DimensionError(f"global_avg_pool expects H x W x D, got {a.shape}")
    H, W, D = a.shape
    out = Tensor(a.data.mean(axis=(0, 1)), check=False)
    return record(out, (a,), lambda g: (np.broadcast_to(g / (H * W), a.shape).copy(),))


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fully-connected transform ``x @ w + b`` for a vector ``x``."""
    if x.data.ndim != 1 or w.data.ndim != 2 or w.shape[0] != x.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape} (axis 0 must match input length)")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} vs weight output axis {w.shape[1]}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        gx = w.data @ g if x.requires_grad else None
        gw = np.outer(x.data, g) if w.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, g)

    return record(out, inputs, back)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Zero-padded ("same") 2-D convolution, optionally strided.

    Output spatial size is ``ceil(H / stride) x ceil(W / stride)``.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d: input must be H x W x Cin, got {x.shape}")
    if w.data.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be kh x kw x Cin x Cout, got {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel spatial axes (0, 1) must be odd, got {kh}x{kw}")
    if cin != x.shape[2]:
        raise DimensionError(f"conv2d: input channel axis 2 has {x.shape[2]} but kernel axis 2 has {cin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} vs kernel output axis 3 = {cout}")
    H, W, _ = x.shape
    Ho, Wo = kernels.conv_out_size(H, stride), kernels.conv_out_size(W, stride)
    if kh == 1 and kw == 1 and stride == 1:
        cols = x.data.reshape(H * W, cin)
    else:
        cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride)
    wm = w.data.reshape(kh * kw * cin, cout)
    y = cols @ wm
    if b is not None:
        y = y + b.data
    out = Tensor(y.reshape(Ho, Wo, cout))
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(Ho * Wo, cout)
        gx = gw = None
        if x.requires_grad:
            gcols = g2 @ wm.T
            if kh == 1 and kw == 1 and stride == 1:
                gx = gcols.reshape(H, W, cin)
            else:
                gx = kernels.col2im(gcols, H, W, cin, kh, kw, stride)
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return record(out, inputs, back)


# ---------------------------------------------------------------------------
# pooling / normalisation / losses
# ---------------------------------------------------------------------------


def max_pool_bins(fm: Tensor, y0: int, y1: int, x0: int, x1: int, K: int) -> Tensor:
    """Max over a K x K grid of integer bins covering rows [y0, y1), cols [x0, x1).

    Bin ``i`` spans ``[floor(i*h/K), ceil((i+1)*h/K))`` relative to the start,
    which is never empty. Gradient goes to the argmax cell of each bin.
    """
    H, W, D = fm.shape
    if not (0 <= y0 < y1 <= H and 0 <= x0 < x1 <= W):
        raise DimensionError(f"max_pool_bins: rect rows [{y0},{y1}) cols [{x0},{x1}) outside {H}x{W}")
    pooled, arg = kernels.roi_pool_forward(np.ascontiguousarray(fm.data), y0, y1, x0, x1, K)
    out = Tensor(pooled, check=False)
    return record(out, (fm,), lambda g: (kernels.roi_pool_backward(np.ascontiguousarray(g), arg, H, W),))


def softmax2d(z: Tensor) -> Tensor:
    """Softmax over every entry of a K x K map."""
    if z.data.ndim != 2:
        raise DimensionError(f"softmax2d expects a 2-D map, got {z.shape}")
    e = np.exp(z.data - z.data.max())
    p = e / e.sum()
    out = Tensor(p, check=False)
    return record(out, (z,), lambda g: (p * (g - (g * p).sum()),))


def pixel_softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-location 2-class softmax cross-entropy averaged over locations.

    ``logits`` is ``K x K x 2``; ``labels`` is a ``K x K`` array of 0/1.
    """
    if logits.data.ndim != 3 or logits.shape[2] != 2:
        raise DimensionError(f"pixel_softmax_xent: logits must be K x K x 2, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:2]:
        raise DimensionError(f"pixel_softmax_xent: labels {labels.shape} vs logits axes (0, 1) {logits.shape[:2]}")
    lab = labels.astype(np.int64)
    zl = logits.data
    m = zl.max(axis=2, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(zl - m).sum(axis=2))
    picked = np.take_along_axis(zl, lab[..., None], axis=2)[..., 0]
    n = lab.size
    out = Tensor(np.asarray((lse - picked).mean()), check=False)

    def back(g):
        p = np.exp(zl - lse[..., None])
        onehot = np.zeros_like(zl)
        np.put_along_axis(onehot, lab[..., None], 1.0, axis=2)
        return ((p - onehot) * (g / n),)

    return record(out, (logits,), back)


def softmax_xent(logits: Tensor, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` for a logit vector."""
    if logits.data.ndim != 1:
        raise DimensionError(f"softmax_xent expects a vector of logits, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"class {target} out of range [0, {n})")
    z = logits.data
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    out = Tensor(np.asarray(lse - z[target]), check=False)

    def back(g):
        p = np.exp(z - lse)
        p[target] -= 1.0
        return (p * g,)

    return record(out, (logits,), back)
