"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Only the handful of ops the models in this package need are provided. Every op
works on plain (untaped) tensors too, in which case nothing is recorded and the
call is just a numpy computation; that is how inference paths avoid tape cost.

    tape = Tape()
    w = tape.watch(param)
    loss = ad.mean(ad.square(x @ w))
    tape.backward(loss)       # param.grad now holds d loss / d param
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NumericalError(FloatingPointError):
    """A value that must be finite is not."""


class TapeError(RuntimeError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense float64 array, optionally recorded on a :class:`Tape`."""

    __slots__ = ("data", "tape", "grad", "param", "_requires_grad")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = _as_array(data)
        self.tape = tape
        self.grad: np.ndarray | None = None
        self.param: Param | None = None
        self._requires_grad = False
        if not np.all(np.isfinite(self.data)):
            raise NumericalError("tensor contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, taped={self.tape is not None})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Param:
    """A named trainable array with a gradient accumulator of the same shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = _as_array(self.value).copy()
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of ops; one tape per forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self._leaves: list[Tensor] = []

    def watch(self, param: Param) -> Tensor:
        """Leaf tensor whose gradient is accumulated into ``param.grad``."""
        t = Tensor(param.value, tape=self)
        t.param = param
        t._requires_grad = True
        self._leaves.append(t)
        return t

    def input(self, data) -> Tensor:
        """Leaf tensor whose gradient is kept on ``tensor.grad``."""
        t = Tensor(data, tape=self)
        t._requires_grad = True
        self._leaves.append(t)
        return t

    def backward(self, out: Tensor, seed=None) -> None:
        """Propagate ``seed`` (default ones) from ``out`` back to all leaves.

        Gradients are added to whatever is already in ``Param.grad`` /
        ``Tensor.grad``, so calling this twice doubles them.
        """
        if not self.records or out.tape is not self:
            raise TapeError("backward called on a tensor with no recorded forward pass")
        if seed is None:
            seed = np.ones_like(out.data)
        seed = _as_array(seed)
        if seed.shape != out.shape:
            raise ShapeError("backward", out.shape, seed.shape)

        grads: dict[int, np.ndarray] = {id(out): seed}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or inp.tape is not self:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient")
            if leaf.param is not None:
                leaf.param.grad += g
            else:
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def constant(data) -> Tensor:
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor(data, tape=tape)
    if tape is not None:
        tape.records.append(_Record(out, inputs, vjp))
    return out


# --- elementwise -----------------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("div", a, b)
    av, bv = a.data, b.data
    return _emit(av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = _wrap(a)
    return _emit(a.data + float(c), (a,), lambda g: (g,))


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is passed only where a > floor."""
    a = _wrap(a)
    keep = a.data > floor
    return _emit(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def square(a) -> Tensor:
    a = _wrap(a)
    av = a.data
    return _emit(av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    av = a.data
    if np.any(av <= 0):
        raise NumericalError("log of non-positive value")
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = _sigmoid(a.data)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _wrap(a)
    x = a.data
    s = _sigmoid(x)
    return _emit(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = _wrap(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return _emit(out, (a,), lambda g: (g * s,))


# --- reductions and shape ops ---------------------------------------------


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(out, (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def broadcast(a, shape: Sequence[int]) -> Tensor:
    """Repeat a scalar (size-1) tensor to ``shape``."""
    a = _wrap(a)
    if a.data.size != 1:
        raise ShapeError("broadcast", a.shape, tuple(shape))
    old = a.shape
    return _emit(np.full(tuple(shape), a.data.reshape(())), (a,), lambda g: (np.reshape(g.sum(), old),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = tuple(_wrap(p) for p in parts)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(p.shape for p in parts)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, parts, vjp)


def take_rows(table, index) -> Tensor:
    """Embedding lookup: ``table[index]`` for a 2-D table and integer index."""
    table = _wrap(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("take_rows", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.data[idx], (table,), vjp)


# --- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D @ 2-D, 2-D @ 1-D and 1-D @ 2-D operands."""
    a, b = _wrap(a), _wrap(b)
    av, bv = a.data, b.data
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or (av.ndim == 1 and bv.ndim == 1):
        raise ShapeError("matmul", a.shape, b.shape)
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        return bv @ g, np.outer(av, g)

    return _emit(av @ bv, (a, b), vjp)


def add_bias(a, b) -> Tensor:
    """Add a length-M vector to every row of an N x M matrix."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError("add_bias", a.shape, b.shape)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))


def mul_rows(a, w) -> Tensor:
    """Scale row n of an N x M matrix by ``w[n]``."""
    a, w = _wrap(a), _wrap(w)
    if a.data.ndim != 2 or w.data.ndim != 1 or a.shape[0] != w.shape[0]:
        raise ShapeError("mul_rows", a.shape, w.shape)
    av, wv = a.data, w.data
    return _emit(av * wv[:, None], (a, w), lambda g: (g * wv[:, None], (g * av).sum(axis=1)))


def softmax(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError("softmax", a.shape)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (a,), vjp)


def logsumexp(a) -> Tensor:
    """log(sum(exp(a))) over all entries, shifted for stability."""
    a = _wrap(a)
    m = a.data.max()
    e = np.exp(a.data - m)
    total = e.sum()
    return _emit(np.asarray(m + np.log(total)), (a,), lambda g: (g * e / total,))


# --- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Iterable[Param], lr: float, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        for p in params:
            if p.name in state.m:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        return state


def adam_step(state: AdamState, params: Iterable[Param]) -> None:
    """One bias-corrected Adam update (minimizing); zeroes the gradients."""
    params = list(params)
    for p in params:
        if p.name not in state.m:
            raise KeyError(f"Adam state has no moments for parameter {p.name!r}")
        if state.m[p.name].shape != p.shape:
            raise ShapeError("adam_step", state.m[p.name].shape, p.shape)
    state.step_count += 1
    k = state.step_count
    c1 = 1.0 - state.beta1**k
    c2 = 1.0 - state.beta2**k
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


# --- finite-difference checking --------------------------------------------


@dataclass
class GradcheckResult:
    ok: bool
    worst_rel_err: float
    worst_coord: tuple[str, int] | None
    n_checked: int


def gradcheck(
    loss_fn: Callable[[Tape], Tensor],
    params: Sequence[Param],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = 64,
    rng: np.random.Generator | None = None,
) -> GradcheckResult:
    """Compare tape gradients of a scalar loss against central differences.

    ``loss_fn`` must build the loss on the tape it is given and be deterministic
    (re-seed any randomness inside). The error for each checked coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    tape = Tape()
    out = loss_fn(tape)
    if out.data.size != 1:
        raise ShapeError("gradcheck", out.shape)
    if not np.isfinite(out.data).all():
        raise NumericalError("non-finite loss in gradcheck")
    tape.backward(out)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    coords = [(p, i) for p in params for i in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def value() -> float:
        v = float(loss_fn(Tape()).data)
        if not np.isfinite(v):
            raise NumericalError("non-finite loss in gradcheck")
        return v

    worst, where = 0.0, None
    for p, i in coords:
        flat = p.value.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = value()
        flat[i] = orig - h
        down = value()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        err = abs(analytic[p.name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        if err > worst:
            worst, where = err, (p.name, i)
    return GradcheckResult(worst <= tol, worst, where, len(coords))
