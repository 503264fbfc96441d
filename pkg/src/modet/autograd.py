"""Reverse-mode automatic differentiation over dense float64 tensors.

Ops executed inside a ``with Tape():`` block are recorded; the tape then
replays adjoints in reverse creation order (creation order is already
topological).  Outside a tape, the same ops run as plain forward numpy
computations, which doubles as a free inference mode.

Everything is double precision.  Elementwise ops broadcast only over
leading singleton dims (a (d,) bias adds to an (n, d) activation;
anything richer is rejected), so every adjoint is a plain sum over the
broadcast leading axes.  Distinct tapes on distinct threads are
independent; a single tape is not thread-safe.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_STACK = threading.local()


def _tape_stack() -> list:
    if not hasattr(_STACK, "tapes"):
        _STACK.tapes = []
    return _STACK.tapes


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "grad", "_needs")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._needs = self.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; scalars multiply/shift without entering the graph
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Records (output, inputs, adjoint) triples in creation order."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._on_tape: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self._records.append((out, inputs, vjp))
        self._on_tape.add(id(out))

    def __len__(self):
        return len(self._records)

    def backward(self, root: Tensor):
        """Populate ``grad`` on every requires_grad leaf reachable from root.

        Gradients accumulate additively, both across fan-out within this
        call and across repeated backward calls (callers zero grads
        between steps).
        """
        if root.data.shape != ():
            raise ValueError(f"backward root must be a scalar, got shape {root.data.shape}")
        if id(root) not in self._on_tape:
            raise ValueError("backward root was not produced on this tape")
        pending: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
        for out, inputs, vjp in reversed(self._records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            # adjoints may alias g or each other (identity/view vjps), which
            # is safe because accumulation rebinds and no vjp mutates its
            # argument; only the leaf buffers are written in place
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t._needs:
                    continue
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi
                else:
                    key = id(t)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = np.asarray(gi, dtype=np.float64)


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t._needs for t in inputs):
        out._needs = True
        tape._record(out, inputs, vjp)
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    """Equal shapes, or mismatches confined to leading singleton dims."""
    sa, sb = a.data.shape, b.data.shape
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + sa
    pb = (1,) * (n - len(sb)) + sb
    for p, q in ((pa, pb), (pb, pa)):
        last_bcast, first_real = -1, n
        for i in range(n):
            if p[i] == q[i]:
                continue
            if p[i] == 1:
                last_bcast = i
            elif q[i] != 1:
                raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")
        for i in range(n):
            if p[i] > 1:
                first_real = i
                break
        if last_bcast >= first_real:
            raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _emit(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _emit(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _emit(ad * bd, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise ValueError("div: zero denominator")
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _emit(ad / bd, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _emit(a.data * c, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacked-matrix semantics (ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must have ndim >= 2, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _emit(ad @ bd, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ValueError(f"transpose: needs ndim >= 2, got {a.shape}")

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _emit(np.swapaxes(a.data, -1, -2), (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"reshape: negative dimension in {shape}")
    if int(np.prod(shape)) != a.data.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    ad_shape = a.data.shape

    def vjp(g):
        return (g.reshape(ad_shape),)

    return _emit(a.data.reshape(shape), (a,), vjp)


def swap_axes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    for ax in (axis1, axis2):
        if not -a.ndim <= ax < a.ndim:
            raise ValueError(f"swap_axes: axis {ax} out of range for {a.shape}")

    def vjp(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _emit(np.ascontiguousarray(np.swapaxes(a.data, axis1, axis2)), (a,), vjp)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _emit(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _emit(np.log(ad), (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _emit(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _emit(np.where(mask, a.data, 0.0), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    nd = tensors[0].ndim
    ax = axis if axis >= 0 else axis + nd
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ValueError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for i in range(nd):
            if i != ax and t.shape[i] != base[i]:
                raise ValueError(f"concat: incompatible shapes {tuple(base)} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=ax) for i in range(len(sizes))
        )

    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    ax = axis if axis >= 0 else axis + a.ndim
    size = a.shape[ax]
    if not (0 <= start <= stop <= size):
        raise ValueError(f"slice: range [{start}, {stop}) out of bounds for axis {ax} of {a.shape}")
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(a.ndim))
    ad_shape = a.data.shape

    def vjp(g):
        full = np.zeros(ad_shape, dtype=np.float64)
        full[idx] = g
        return (full,)

    return _emit(a.data[idx].copy(), (a,), vjp)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Rows of a table: (V, ...) gathered by an int index array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim < 1:
        raise ValueError("gather_rows: table must have ndim >= 1")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"gather_rows: index out of range for table with {a.shape[0]} rows")
    ad_shape = a.data.shape

    def vjp(g):
        full = np.zeros(ad_shape, dtype=np.float64)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + ad_shape[1:]))
        return (full,)

    return _emit(a.data[idx], (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, with max-subtraction for stability."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), vjp)


def tensor_sum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        return (np.full(shape, g, dtype=np.float64),)

    return _emit(a.data.sum(), (a,), vjp)


def tensor_mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    n = a.data.size

    def vjp(g):
        return (np.full(shape, g / n, dtype=np.float64),)

    return _emit(a.data.mean(), (a,), vjp)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance."""
    a = as_tensor(a)
    d = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit(xhat, (a,), vjp)


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The denominator is max(|analytic|, |numeric|, 1e-8) componentwise; the
    caller asserts on the returned maximum.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    tape.backward(y)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(probe.data)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(probe.data)).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
