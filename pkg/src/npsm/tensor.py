"""Dense tensors and a reverse-mode tape.

Operations only record themselves while a :class:`Tape` is active (``with
Tape() as tape:``). Outside a tape every op is a plain numpy computation,
which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

_FLOATS = (np.float32, np.float64)


class Tensor:
    """A real-valued array that can take part in reverse-mode differentiation.

    ``data`` is never mutated after construction; only ``grad`` changes.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, check: bool = True):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float64)
        if check and not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values in tensor{' ' + name if name else ''}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


class Tape:
    """Ordered record of differentiable operations.

    Each record is ``(output, inputs, backward_fn)`` where ``backward_fn``
    maps the output gradient to one gradient (or ``None``) per input.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.records.append((out, tuple(inputs), backward))

    def clear(self):
        self.records.clear()

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor that requires it.

        Intermediate gradients live in a side table and are dropped afterwards.
        """
        if grad is None:
            if loss.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): grad}
        produced = set()
        for out, _, _ in self.records:
            produced.add(id(out))
        leaves: dict[int, Tensor] = {}
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape() -> Optional[Tape]:
    s = _stack()
    return s[-1] if s else None


def record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register ``out`` on the active tape if any input requires a gradient."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0, kinks: bool = False) -> float:
    """Max over entries of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` must return a single-element tensor. ``x`` is evaluated in its own
    dtype, so pass float64 data for meaningful results. With ``max_coords``,
    tensors larger than that are checked on a seeded random subset of entries.
    See :func:`grad_check_report` for ``kinks``.
    """
    return grad_check_report(f, x, eps, max_coords, seed, kinks)[0]


KINK_JUMP = 1e-4


def grad_check_report(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      max_coords: Optional[int] = None, seed: int = 0, kinks: bool = False):
    """Returns (max relative error, number of entries with a kink inside +-eps).

    An entry has a kink when its forward and backward one-sided differences
    disagree by more than ``KINK_JUMP`` (relative); a ReLU or max switching
    branch does this. With ``kinks=True`` such entries are compared against
    the one-sided difference on the smooth side instead of the central one.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x0 = x.data.copy()
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    if y.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got output shape {y.shape}")
    tape.backward(y)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    f0 = y.item()

    idx = np.arange(x0.size)
    if max_coords is not None and x0.size > max_coords:
        idx = np.sort(np.random.default_rng(seed).choice(x0.size, size=max_coords, replace=False))
    an = analytic.reshape(-1)[idx]
    scale = np.maximum(1.0, np.abs(an))
    fwd = np.empty(len(idx))
    bwd = np.empty(len(idx))
    for n, k in enumerate(idx):
        xp = x0.copy().reshape(-1)
        xp[k] += eps
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        xp[k] -= 2 * eps
        fm = f(Tensor(xp.reshape(x0.shape))).item()
        fwd[n] = (fp - f0) / eps
        bwd[n] = (f0 - fm) / eps
    err = np.abs(an - (fwd + bwd) / 2) / scale
    kinked = np.abs(fwd - bwd) / scale > KINK_JUMP
    if kinks:
        one_sided = np.minimum(np.abs(an - fwd), np.abs(an - bwd)) / scale
        err = np.where(kinked, np.minimum(err, one_sided), err)
    return (float(err.max()) if err.size else 0.0), int(kinked.sum())
