"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every operation appends one node to a :class:`Tape` and returns a
:class:`Tensor` handle. A single backward sweep over the tape produces a
gradient for every node reachable from the loss; unreachable nodes read as
exact zeros. Tapes are single-threaded; use disjoint tapes from different
threads.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

__all__ = [
    "Array",
    "AutodiffError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "Gradients",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "div",
    "matmul",
    "reduce_sum",
    "reduce_mean",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "square",
    "sqrt",
    "concat",
    "clamp_min",
    "reshape",
    "column",
    "stop_gradient",
]


class AutodiffError(Exception):
    pass


class NonFiniteError(AutodiffError):
    """A forward value or gradient contains NaN or Inf."""


class Tensor:
    """Handle to one tape node; holds the forward value (read-only by convention)."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: Array):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(idx={self.idx}, value={self.value!r})"

    # Arithmetic sugar; python scalars become constants on the same tape.
    def __add__(self, other):
        return add(self, _wrap(self.tape, other))

    def __radd__(self, other):
        return add(_wrap(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _wrap(self.tape, other))

    def __rsub__(self, other):
        return sub(_wrap(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _wrap(self.tape, other))

    def __rmul__(self, other):
        return mul(_wrap(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, _wrap(self.tape, other))

    def __rtruediv__(self, other):
        return div(_wrap(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce_mean(self, axis)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)


class Tape:
    """Append-only record of forward ops, in topological order."""

    __slots__ = ("_parents", "_backwards")

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._backwards: list[Callable[[Array], tuple] | None] = []

    def __len__(self) -> int:
        return len(self._parents)

    def _record(self, value: Array, parents: tuple[int, ...], backward_fn, op: str) -> Tensor:
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite output of op '{op}'")
        self._parents.append(parents)
        self._backwards.append(backward_fn)
        return Tensor(self, len(self._parents) - 1, value)

    def leaf(self, value) -> Tensor:
        """Record an input node (parameter or constant)."""
        return self._record(np.asarray(value, dtype=np.float64), (), None, "leaf")


def _wrap(tape: Tape, other) -> Tensor:
    if isinstance(other, Tensor):
        if other.tape is not tape:
            raise AutodiffError("operands live on different tapes")
        return other
    return tape.leaf(other)


def _same_tape(a: Tensor, b: Tensor) -> Tape:
    if a.tape is not b.tape:
        raise AutodiffError("operands live on different tapes")
    return a.tape


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Gradients:
    """Gradient lookup per tensor; exact zeros for nodes the loss never reached."""

    __slots__ = ("_table", "_tape")

    def __init__(self, table: dict[int, Array], tape: Tape):
        self._table = table
        self._tape = tape

    def __getitem__(self, t: Tensor) -> Array:
        if t.tape is not self._tape:
            raise AutodiffError("tensor does not belong to this backward pass")
        g = self._table.get(t.idx)
        if g is None:
            return np.zeros_like(t.value)
        return np.asarray(g, dtype=np.float64).reshape(t.value.shape)


def backward(loss: Tensor) -> Gradients:
    """One reverse sweep from a scalar loss. Pure: repeated calls agree bitwise."""
    if loss.value.ndim != 0:
        raise AutodiffError(f"loss must be a scalar, got shape {loss.value.shape}")
    tape = loss.tape
    table: dict[int, Array] = {loss.idx: np.ones((), dtype=np.float64)}
    parents_list = tape._parents
    backwards_list = tape._backwards
    for idx in range(loss.idx, -1, -1):
        g = table.get(idx)
        if g is None:
            continue
        bwd = backwards_list[idx]
        if bwd is None:
            continue
        for p_idx, p_grad in zip(parents_list[idx], bwd(g)):
            if p_grad is None:
                continue
            if not np.isfinite(p_grad).all():
                raise NonFiniteError("non-finite gradient during backward")
            acc = table.get(p_idx)
            table[p_idx] = p_grad if acc is None else acc + p_grad
    return Gradients(table, tape)


# ---------------------------------------------------------------------------
# Primitive operations


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return tape._record(av + bv, (a.idx, b.idx), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return tape._record(av - bv, (a.idx, b.idx), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._record(av * bv, (a.idx, b.idx), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return a.tape._record(-a.value, (a.idx,), bwd, "neg")


def div(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """a / (b + eps); the additive stabilizer is a plain constant."""
    tape = _same_tape(a, b)
    av = a.value
    denom = b.value + eps

    def bwd(g):
        ga = g / denom
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * av / denom, b.value.shape)

    return tape._record(av / denom, (a.idx, b.idx), bwd, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise AutodiffError(f"matmul expects 2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def bwd(g):
        return g @ bv.T, av.T @ g

    return tape._record(av @ bv, (a.idx, b.idx), bwd, "matmul")


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    av = a.value

    if axis is None:
        def bwd(g):
            return (np.broadcast_to(g, av.shape).copy(),)

        return a.tape._record(av.sum(), (a.idx,), bwd, "sum")

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return a.tape._record(av.sum(axis=axis), (a.idx,), bwd, "sum")


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    av = a.value
    count = av.size if axis is None else av.shape[axis]
    if count == 0:
        raise AutodiffError("mean over an empty axis")

    if axis is None:
        def bwd(g):
            return (np.broadcast_to(g / count, av.shape).copy(),)

        return a.tape._record(av.mean(), (a.idx,), bwd, "mean")

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / count, axis), av.shape).copy(),)

    return a.tape._record(av.mean(axis=axis), (a.idx,), bwd, "mean")


def sigmoid(a: Tensor) -> Tensor:
    v = a.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return a.tape._record(out, (a.idx,), bwd, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return a.tape._record(out, (a.idx,), bwd, "tanh")


def relu(a: Tensor) -> Tensor:
    v = a.value

    def bwd(g):
        return (g * (v > 0.0),)

    return a.tape._record(np.maximum(v, 0.0), (a.idx,), bwd, "relu")


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Numerically stable softmax(a / temperature) along `axis`."""
    if temperature <= 0.0:
        raise AutodiffError("softmax temperature must be positive")
    z = a.value / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return a.tape._record(out, (a.idx,), bwd, "softmax")


def square(a: Tensor) -> Tensor:
    v = a.value

    def bwd(g):
        return (2.0 * v * g,)

    return a.tape._record(v * v, (a.idx,), bwd, "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)

    def bwd(g):
        # Singular at 0; surfaces as NonFiniteError rather than a silent value.
        return (g / (2.0 * out),)

    return a.tape._record(out, (a.idx,), bwd, "sqrt")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise AutodiffError("concat of zero tensors")
    tape = tensors[0].tape
    for t in tensors[1:]:
        _same_tape(tensors[0], t)
    values = [t.value for t in tensors]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return tape._record(
        np.concatenate(values, axis=axis), tuple(t.idx for t in tensors), bwd, "concat"
    )


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; subgradient 0 at the kink (a == floor)."""
    v = a.value

    def bwd(g):
        return (g * (v > floor),)

    return a.tape._record(np.maximum(v, floor), (a.idx,), bwd, "clamp_min")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.value.shape

    def bwd(g):
        return (g.reshape(old),)

    return a.tape._record(a.value.reshape(tuple(shape)), (a.idx,), bwd, "reshape")


def column(a: Tensor, j: int) -> Tensor:
    """Column j of a 2-D tensor as a 1-D tensor."""
    v = a.value
    if v.ndim != 2:
        raise AutodiffError(f"column expects a 2-D tensor, got shape {v.shape}")

    def bwd(g):
        z = np.zeros_like(v)
        z[:, j] = g
        return (z,)

    return a.tape._record(v[:, j].copy(), (a.idx,), bwd, "column")


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity; backward contributes exactly zero to all ancestors."""
    return a.tape._record(a.value, (), None, "stop_gradient")


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def grad_check(
    build: Callable[[Tape, list[Tensor]], Tensor],
    params: Sequence[Array],
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    `build(tape, leaves)` must deterministically construct a scalar loss from
    fresh leaves wrapping `params`. When `max_coords_per_param` is set, a
    random subset of coordinates per parameter is checked (probing every
    coordinate of a large model is quadratic in its size).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = [np.array(p, dtype=np.float64) for p in params]

    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    grads = backward(build(tape, leaves))
    analytic = [grads[leaf] for leaf in leaves]

    def eval_loss() -> float:
        t = Tape()
        out = build(t, [t.leaf(p) for p in params])
        if out.value.ndim != 0:
            raise AutodiffError("grad_check loss must be scalar")
        return float(out.value)

    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        ana_flat = analytic[k].reshape(-1)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = eval_loss()
            flat[i] = orig - eps
            f_lo = eval_loss()
            flat[i] = orig
            numeric = (f_hi - f_lo) / (2.0 * eps)
            rel = abs(float(ana_flat[i]) - numeric) / max(
                1.0, abs(float(ana_flat[i])), abs(numeric)
            )
            if rel > worst:
                worst = rel
    return worst
