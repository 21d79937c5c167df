"""Minimal tape-based reverse-mode automatic differentiation.

Only the operations needed by the teacher/student networks and by the
input-gradient detector are provided.  Everything is float64.

Usage::

    x = Tensor(np.random.rand(3, 4), requires_grad=True)
    with GradTape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # == 2 * x.values

Operations executed outside an active tape are not recorded (inference mode).
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "GradientError",
    "Tensor",
    "GradTape",
    "as_tensor",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "matmul",
    "relu",
    "sqrt",
    "l2norm",
    "tsum",
    "reshape",
    "transpose",
    "softmax_lastdim",
    "layernorm",
    "conv2d",
    "deconv2d",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Misuse of the gradient machinery (stale grads, double backward, ...)."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Shape-carrying float64 array that can participate in gradient recording."""

    __slots__ = ("values", "grad", "requires_grad", "_tape", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: GradTape | None = None  # tape that produced this tensor
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class GradTape:
    """Ordered record of executed operations.

    A tape is bound to the thread that entered it.  ``backward`` replays the
    recorded adjoints in reverse order exactly once; a second call raises
    until :meth:`reset` is invoked.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], adjoint: Callable) -> None:
        if self.consumed:
            raise GradientError("tape already replayed; call reset() before recording again")
        out._tape = self
        self._records.append((out, inputs, adjoint))

    def reset(self) -> None:
        self._records.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise GradientError("backward already called on this tape; reset() first")
        if loss._tape is not self:
            raise GradientError("loss was not recorded on this tape")

        produced = {id(out) for out, _, _ in self._records}
        leaves: dict[int, Tensor] = {}
        for _, inputs, _ in self._records:
            for t in inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        stale = [t for t in leaves.values() if t.grad is not None]
        if stale:
            names = ", ".join(t.name or repr(t) for t in stale[:3])
            raise GradientError(f"leaf gradients not zeroed before backward: {names}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for out, inputs, adjoint in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, adjoint(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.values) if g is None else np.ascontiguousarray(g)
        self._records.clear()
        self.consumed = True


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape that recorded it."""
    if loss._tape is None:
        raise GradientError("loss is not connected to any recorded operation")
    loss._tape.backward(loss)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def _make(values: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=track)
    if track:
        tape.record(out, tuple(inputs), adjoint)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.values + float(c), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values < 0):
        raise ValueError("sqrt of negative value")
    r = np.sqrt(a.values)
    return _make(r, (a,), lambda g: (g * 0.5 / r,))


def l2norm(a: Tensor, axis=None) -> Tensor:
    """sqrt(sum(a**2)) over ``axis``; the subgradient at a zero norm is 0."""
    av = a.values
    r = np.sqrt((av * av).sum(axis=axis))

    def adjoint(g):
        safe = np.where(r > 0, r, 1.0)
        coef = np.where(r > 0, g / safe, 0.0)
        if axis is not None:
            coef = np.expand_dims(coef, axis)
        return (coef * av,)

    return _make(np.asarray(r), (a,), adjoint)


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), adjoint)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def adjoint(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), adjoint)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), adjoint)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = 1e-10) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = None if gamma is None else gamma.values
    out = xhat if gv is None else xhat * gv
    if beta is not None:
        out = out + beta.values

    def adjoint(g):
        gh = g if gv is None else g * gv
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    inputs = [x] + [t for t in (gamma, beta) if t is not None]
    return _make(out, inputs, adjoint)


# ---------------------------------------------------------------------------
# convolution (stride 1, "same" zero padding, odd square kernels)
# ---------------------------------------------------------------------------

def _check_kernel(k: np.ndarray) -> int:
    if k.ndim != 4 or k.shape[2] != k.shape[3] or k.shape[2] % 2 == 0:
        raise DimensionError(f"kernel must be F x C x k x k with odd k, got {k.shape}")
    return k.shape[2] // 2


def _im2col(x: np.ndarray, ks: int) -> np.ndarray:
    """(..., C, M, N) -> (..., C*ks*ks, M*N) with zero padding ks//2."""
    p = ks // 2
    *lead, c, m, n = x.shape
    pad = [(0, 0)] * len(lead) + [(0, 0), (p, p), (p, p)]
    xp = np.pad(x, pad)
    cols = np.empty(tuple(lead) + (c, ks, ks, m, n))
    for di in range(ks):
        for dj in range(ks):
            cols[..., di, dj, :, :] = xp[..., di:di + m, dj:dj + n]
    return cols.reshape(tuple(lead) + (c * ks * ks, m * n))


def _col2im(cols: np.ndarray, c: int, ks: int, m: int, n: int) -> np.ndarray:
    p = ks // 2
    lead = cols.shape[:-2]
    cols = cols.reshape(lead + (c, ks, ks, m, n))
    xp = np.zeros(lead + (c, m + 2 * p, n + 2 * p))
    for di in range(ks):
        for dj in range(ks):
            xp[..., di:di + m, dj:dj + n] += cols[..., di, dj, :, :]
    return xp[..., p:p + m, p:p + n]


def _conv_fwd(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    f, c, ks, _ = k.shape
    *lead, _, m, n = x.shape
    out = k.reshape(f, -1) @ _im2col(x, ks)
    return out.reshape(tuple(lead) + (f, m, n))


def _conv_adj_input(dy: np.ndarray, k: np.ndarray) -> np.ndarray:
    f, c, ks, _ = k.shape
    *lead, _, m, n = dy.shape
    dcols = k.reshape(f, -1).T @ dy.reshape(tuple(lead) + (f, m * n))
    return _col2im(dcols, c, ks, m, n)


def _conv_adj_kernel(x: np.ndarray, dy: np.ndarray, kshape: tuple) -> np.ndarray:
    f, c, ks, _ = kshape
    cols = _im2col(x, ks)
    dyf = dy.reshape(dy.shape[:-2] + (-1,))
    dk = dyf @ np.swapaxes(cols, -1, -2)
    while dk.ndim > 2:
        dk = dk.sum(axis=0)
    return dk.reshape(kshape)


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """Cross-correlation of ``x`` (..., C, M, N) with ``k`` (F, C, k, k)."""
    _check_kernel(k.values)
    if x.ndim < 3 or x.shape[-3] != k.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {k.shape}")
    xv, kv = x.values, k.values

    def adjoint(g):
        return _conv_adj_input(g, kv), _conv_adj_kernel(xv, g, kv.shape)

    return _make(_conv_fwd(xv, kv), (x, k), adjoint)


def deconv2d(x: Tensor, k: Tensor) -> Tensor:
    """Transposed convolution: the exact adjoint of ``conv2d(., k)``.

    ``x`` is (..., F, M, N), ``k`` is (F, C, k, k); the result is (..., C, M, N).
    """
    _check_kernel(k.values)
    if x.ndim < 3 or x.shape[-3] != k.shape[0]:
        raise DimensionError(f"deconv2d: input {x.shape} does not match kernel {k.shape}")
    xv, kv = x.values, k.values

    def adjoint(g):
        return _conv_fwd(g, kv), _conv_adj_kernel(g, xv, kv.shape)

    return _make(_conv_adj_input(xv, kv), (x, k), adjoint)
