"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Every differentiable primitive records one node on the active :class:`Tape`
(execution order is a topological order, so :func:`backward` simply replays
the tape in reverse). When no tape is active the same functions run as plain
numpy and record nothing, which is what the finite-difference oracle relies
on. Tensors are immutable after construction; the single sanctioned mutation
is the optimizer writing into parameter ``.data`` between training steps.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Test seam: map op name -> replacement vjp, consulted at record time.
# Used by the gradient-audit negative control; empty in normal operation.
_VJP_OVERRIDES: dict[str, Callable] = {}


class Tensor:
    """Immutable dense array of 64-bit floats.

    External data is validated (finite values only); results of internal ops
    skip the check. ``requires_grad`` marks trainable leaves; op outputs
    inherit it only while a tape is active.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, *, _internal: bool = False):
        if _internal:
            self.data = data
        else:
            arr = np.ascontiguousarray(data, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ContractError("tensor rejects non-finite values at construction")
            self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are wrapped as constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), _internal=False)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, _internal=True)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, _internal=True)


class _SliceGrad:
    """Sparse gradient: add ``grad`` into slice ``index`` of axis ``axis``.

    Returned by the vjp of :func:`index` so the backward pass allocates a
    single dense buffer per sliced tensor instead of one per time step.
    """

    __slots__ = ("axis", "index", "grad", "shape")

    def __init__(self, axis: int, index: int, grad: np.ndarray, shape: tuple[int, ...]):
        self.axis = axis
        self.index = index
        self.grad = grad
        self.shape = shape


class Tape:
    """Ordered record of primitive ops for one differentiation pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable, str]] = []
        self._produced: set[int] = set()
        self._leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable, name: str) -> None:
        override = _VJP_OVERRIDES.get(name)
        if override is not None:
            vjp = override(vjp)
        self._nodes.append((out, parents, vjp, name))
        self._produced.add(id(out))
        for p in parents:
            if p.requires_grad and id(p) not in self._produced and id(p) not in self._leaf_ids:
                self._leaf_ids.add(id(p))
                self._leaves.append(p)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves)

    def __len__(self) -> int:
        return len(self._nodes)


_TAPE_STACK: list[Tape | None] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_tape:
    """Context manager that suspends recording (used by the FD oracle)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable, name: str) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=False, _internal=True)
    out = Tensor(data, requires_grad=True, _internal=True)
    tape._record(out, parents, vjp, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit(ad * bd, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)

    return _emit(out, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * (0.5 / out),), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) computed as max(x, 0) + log1p(e^-|x|) for stability
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    sig = np.empty_like(ad)
    pos = ad >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    sig[~pos] = ez / (1.0 + ez)
    return _emit(out, (a,), lambda g: (g * sig,), "softplus")


def gelu(a: Tensor) -> Tensor:
    # Exact (erf-based) form; derivative is Phi(x) + x*phi(x).
    ad = a.data
    cdf = 0.5 * (1.0 + _erf(ad * _INV_SQRT2))
    out = ad * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT2PI
        return (g * (cdf + ad * pdf),)

    return _emit(out, (a,), vjp, "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)

    def vjp(g):
        return (g * ((ad > lo) & (ad < hi)),)

    return _emit(out, (a,), vjp, "clip")


# ---------------------------------------------------------------------------
# Linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents do not broadcast, {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _emit(np.matmul(ad, bd), (a, b), vjp, "matmul")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ad.shape).copy(),)

    return _emit(np.asarray(out), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _emit(data, (a,), vjp, "reshape")


def index(a: Tensor, i: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (negative axes allowed)."""
    ax = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[ax] = i
    data = a.data[tuple(sl)]
    shape = a.shape

    def vjp(g):
        return (_SliceGrad(ax, i, g, shape),)

    return _emit(data, (a,), vjp, "index")


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    ax = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, stop)
    data = a.data[tuple(sl)]
    shape = a.shape

    def vjp(g):
        buf = np.zeros(shape)
        buf[tuple(sl)] = g
        return (buf,)

    return _emit(data, (a,), vjp, "slice")


def take(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Gather slices along ``axis`` by integer index array (e.g. a permutation)."""
    ax = axis % a.ndim
    idx = np.asarray(idx)
    data = np.take(a.data, idx, axis=ax)
    shape = a.shape

    def vjp(g):
        buf = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = idx
        np.add.at(buf, tuple(sl), g)
        return (buf,)

    return _emit(data, (a,), vjp, "take")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    ax = axis % parts[0].ndim
    data = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]

    def vjp(g):
        outs = []
        ofs = 0
        for s in sizes:
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(ofs, ofs + s)
            outs.append(g[tuple(sl)])
            ofs += s
        return tuple(outs)

    return _emit(data, tuple(parts), vjp, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.stack([p.data for p in parts], axis=axis)
    ax = axis % data.ndim

    def vjp(g):
        return tuple(np.take(g, k, axis=ax) for k in range(len(parts)))

    return _emit(data, tuple(parts), vjp, "stack")


# ---------------------------------------------------------------------------
# Composites (built from primitives; differentiate automatically)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    # The max shift is treated as a constant; the gradient is unaffected.
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = sub(a, Tensor(m, _internal=True))
    s = tsum(exp(shifted), axis=axis)
    return add(log(s), Tensor(np.squeeze(m, axis=axis), _internal=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    lse = logsumexp(a, axis=axis)
    ax = axis % a.ndim
    return exp(sub(a, reshape(lse, lse.shape[:ax] + (1,) + lse.shape[ax:])))


def cosine_sim(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along ``axis``; result lies in [-1, 1].

    Denominator norms are floored at ``eps`` so all-zero vectors yield 0
    rather than NaN.
    """
    dot = tsum(mul(a, b), axis=axis)
    na = sqrt(tsum(mul(a, a), axis=axis))
    nb = sqrt(tsum(mul(b, b), axis=axis))
    denom = mul(clip_min(na, eps), clip_min(nb, eps))
    return clip(div(dot, denom), -1.0, 1.0)


def clip_min(a: Tensor, lo: float) -> Tensor:
    ad = a.data
    out = np.maximum(ad, lo)

    def vjp(g):
        return (g * (ad > lo),)

    return _emit(out, (a,), vjp, "clip_min")


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(_as_tensor(1.0), sqrt(add(var, _as_tensor(eps))))
    return add(mul(mul(centered, inv), scale), shift)


# ---------------------------------------------------------------------------
# Reverse pass


def backward(root: Tensor, tape: Tape) -> dict[Tensor, Tensor]:
    """Replay ``tape`` in reverse from a scalar ``root``.

    Returns a gradient for every requires_grad leaf that was touched while
    the tape was active; leaves the root does not depend on get zeros.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}

    def accumulate(t: Tensor, g) -> None:
        tid = id(t)
        if isinstance(g, _SliceGrad):
            buf = grads.get(tid)
            if buf is None:
                buf = np.zeros(g.shape)
                grads[tid] = buf
            sl = [slice(None)] * len(g.shape)
            sl[g.axis] = g.index
            buf[tuple(sl)] += g.grad
            return
        cur = grads.get(tid)
        if cur is None:
            # vjps may return views into shared buffers; copy before mutating
            grads[tid] = np.array(g, dtype=np.float64)
        else:
            cur += g

    for out, parents, vjp, _name in reversed(tape._nodes):
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        if g_out.shape != out.shape:
            g_out = np.broadcast_to(g_out, out.shape)
        parent_grads = vjp(g_out)
        for p, g in zip(parents, parent_grads):
            if p.requires_grad and g is not None:
                accumulate(p, g)

    result: dict[Tensor, Tensor] = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape)
        elif g.shape != leaf.shape:
            g = np.broadcast_to(g, leaf.shape).copy()
        result[leaf] = Tensor(g, _internal=True)
    return result
