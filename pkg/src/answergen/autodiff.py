"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Operations record TapeNodes while a Tape is active (see `Tape.__enter__`);
outside a tape they just compute, which is what generation-time code uses.
A tape can be walked backward exactly once. Tensors are confined to the
worker that owns their tape; distinct tapes are independent.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    NonFiniteGradientError,
    NonFiniteValueError,
    ShapeMismatchError,
    TapeConsumedError,
)

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"tensor {name or ''} initialized with non-finite data")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Sugar used throughout the model code.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), constant(-1.0)))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, constant(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    """One recorded primitive application.

    grad_fn maps the output gradient to (input, input-gradient) pairs.
    """
    op_kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]]


@dataclass
class GradientMap:
    """Result of a backward pass, keyed by tensor identity."""
    grads: dict[Tensor, np.ndarray]
    disconnected: list[Tensor] = field(default_factory=list)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self.grads[t]

    def __contains__(self, t: Tensor) -> bool:
        return t in self.grads


class Tape:
    """Execution-ordered record of primitive applications.

    Nodes are appended in forward order, so every node's inputs precede it
    and a single reverse sweep is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientMap:
        """Accumulate d(loss)/d(leaf) for every tracked leaf tensor.

        ``params``, when given, lists tensors the caller cares about; any of
        them not reached by the sweep get a zero gradient and are flagged in
        ``disconnected`` rather than raising.
        """
        if self.consumed:
            raise TapeConsumedError("tape already consumed by a previous backward()")
        self.consumed = True
        if loss.data.size != 1:
            raise ShapeMismatchError(f"loss must be scalar, got shape {loss.shape}")

        grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.output, None)
            if g is None:
                continue
            assert g.shape == node.output.data.shape
            for inp, gi in node.grad_fn(g):
                if gi is None:
                    continue
                if inp.requires_grad or inp._tape is self:
                    seen = grads.get(inp)
                    grads[inp] = gi if seen is None else seen + gi

        result = {t: g for t, g in grads.items() if t.requires_grad}
        disconnected: list[Tensor] = []
        if params is not None:
            for p in params:
                if p not in result:
                    result[p] = np.zeros_like(p.data)
                    disconnected.append(p)
        for t, g in result.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {t.name or t.shape}")
        return GradientMap(result, disconnected)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientMap:
    return tape.backward(loss, params)


# ---------------------------------------------------------------------------
# Primitives. Each computes with numpy, validates the output is finite, and
# records a TapeNode when a tape is active and an input is tracked.
# ---------------------------------------------------------------------------

def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, grad_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteValueError(f"non-finite output of {kind}")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.name = None
    out._tape = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        out._tape = tape
        tape.nodes.append(TapeNode(kind, inputs, out, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def grad_fn(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _record("add", (a, b), out, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def grad_fn(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]

    return _record("mul", (a, b), out, grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for the 2D/1D shape combinations."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeMismatchError(f"matmul: ranks {ad.ndim} and {bd.ndim} unsupported")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0]
    if inner_a != inner_b:
        raise ShapeMismatchError(f"matmul: inner dims {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def grad_fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return [(a, g @ bd.T), (b, ad.T @ g)]
        if ad.ndim == 2 and bd.ndim == 1:
            return [(a, np.outer(g, bd)), (b, ad.T @ g)]
        if ad.ndim == 1 and bd.ndim == 2:
            return [(a, bd @ g), (b, np.outer(ad, g))]
        return [(a, g * bd), (b, g * ad)]

    return _record("matmul", (a, b), out, grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(tensors)
    if not parts:
        raise ShapeMismatchError("concat of zero tensors")
    base = list(parts[0].shape)
    for t in parts[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise ShapeMismatchError("concat: rank mismatch")
        if [n for i, n in enumerate(other) if i != axis] != [n for i, n in enumerate(base) if i != axis]:
            raise ShapeMismatchError("concat: non-axis extents differ")
    out = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        pairs = []
        for i, t in enumerate(parts):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pairs.append((t, g[tuple(sl)]))
        return pairs

    return _record("concat", parts, out, grad_fn)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    parts = tuple(tensors)
    if not parts:
        raise ShapeMismatchError("stack of zero tensors")
    for t in parts[1:]:
        if t.shape != parts[0].shape:
            raise ShapeMismatchError("stack: shapes differ")
    out = np.stack([t.data for t in parts], axis=0)

    def grad_fn(g):
        return [(t, g[i]) for i, t in enumerate(parts)]

    return _record("stack", parts, out, grad_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def grad_fn(g):
        return [(x, g * (1.0 - out * out))]

    return _record("tanh", (x,), out, grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return [(x, g * out * (1.0 - out))]

    return _record("sigmoid", (x,), out, grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1."""
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [(x, out * (g - dot))]

    return _record("softmax", (x,), out, grad_fn)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def grad_fn(g):
        return [(x, g / x.data)]

    return _record("log", (x,), out, grad_fn)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - numpy-style name
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return [(x, np.broadcast_to(g, x.shape).copy())]
        expanded = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(expanded, x.shape).copy())]

    return _record("sum", (x,), np.asarray(out), grad_fn)


def lookup(table: Tensor, indices) -> Tensor:
    """Row lookup in a 2-D table: an int gives a vector, a sequence a matrix."""
    if table.data.ndim != 2:
        raise ShapeMismatchError("lookup table must be 2-D")
    single = isinstance(indices, (int, np.integer))
    idx = int(indices) if single else np.asarray(list(indices), dtype=np.intp)
    out = table.data[idx]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        if single:
            gt[idx] += g
        else:
            np.add.at(gt, idx, g)
        return [(table, gt)]

    return _record("lookup", (table,), np.array(out), grad_fn)


def slice_(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    if not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeMismatchError(f"slice [{start}:{stop}] outside axis of extent {x.shape[axis]}")
    key = [slice(None)] * x.data.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    out = x.data[key]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return [(x, gx)]

    return _record("slice", (x,), out.copy(), grad_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def grad_fn(g):
        return [(x, g.reshape(x.shape))]

    return _record("reshape", (x,), out.copy(), grad_fn)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    _check_broadcast(a, b, "minimum")
    out = np.minimum(a.data, b.data)

    def grad_fn(g):
        take_a = a.data <= b.data
        ga = np.where(take_a, g * np.ones_like(out), 0.0)
        gb = np.where(take_a, 0.0, g * np.ones_like(out))
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _record("minimum", (a, b), out, grad_fn)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    _check_broadcast(a, b, "maximum")
    out = np.maximum(a.data, b.data)

    def grad_fn(g):
        take_a = a.data >= b.data
        ga = np.where(take_a, g * np.ones_like(out), 0.0)
        gb = np.where(take_a, 0.0, g * np.ones_like(out))
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _record("maximum", (a, b), out, grad_fn)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "stack": stack,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "sum": sum,
    "lookup": lookup,
    "slice": slice_,
    "reshape": reshape,
    "minimum": minimum,
    "maximum": maximum,
}


def apply_primitive(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch a primitive by name; the op set the model is built from."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# Finite-difference verification.
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    flagged: bool
    worst: tuple[int, int] | None = None  # (tensor index, flat entry index)


def gradient_check(f: Callable[[], Tensor], wrt: Sequence[Tensor],
                   eps: float = 1e-5, rel_tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must be deterministic and close over the tensors in ``wrt``; their
    data is perturbed in place and restored. Disagreement above ``rel_tol``
    is flagged in the report, not raised, since it may indicate a point of
    non-differentiability rather than a wrong derivative.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    with Tape() as tape:
        loss = f()
    gm = tape.backward(loss, params=wrt)

    max_err = 0.0
    worst = None
    for ti, t in enumerate(wrt):
        analytic = gm[t]
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - fd) / max(1e-6, abs(a) + abs(fd))
            if err > max_err:
                max_err = err
                worst = (ti, i)
    return GradCheckReport(max_rel_error=max_err, flagged=max_err > rel_tol, worst=worst)
