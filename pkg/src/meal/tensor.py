"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Operations are plain functions. When a :class:`Tape` is active (``with Tape()``)
and any input requires a gradient, the op appends a node holding its
vector-Jacobian product. :func:`backward` walks the nodes in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

LOG_FLOOR = 1e-12


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "_produced")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed primitives. Use as a context manager."""

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, op, out, inputs, vjp) -> None:
        for t in inputs:
            if t.requires_grad and not t._produced:
                self.leaves.setdefault(id(t), t)
        out._produced = True
        self.nodes.append(Node(op, out, tuple(inputs), vjp))

    def reset(self) -> None:
        self.nodes.clear()
        self.leaves.clear()


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _emit(op: str, values: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(op, out, inputs, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf recorded on ``tape``, then reset it.

    Leaves the loss does not depend on get a zero gradient.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in tape.leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.values) if g is None else np.array(g, dtype=np.float64)
    tape.reset()


# ---------------------------------------------------------------- primitives


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _emit("matmul", av @ bv, (a, b), vjp)


def add_bias(x, b) -> Tensor:
    """Row-broadcast add of a length-k bias onto an n x k matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if x.values.ndim != 2 or b.values.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")

    def vjp(g):
        return g, g.sum(axis=0)

    return _emit("add_bias", x.values + b.values, (x, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.values.ndim == 0 and a.values.ndim != 0:
        return shift(a, b)
    if a.values.ndim == 0 and b.values.ndim != 0:
        return shift(b, a)
    _same_shape("add", a, b)
    return _emit("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.values.ndim == 0 and a.values.ndim != 0:
        return shift(a, scale(b, -1.0))
    if a.values.ndim == 0 and b.values.ndim != 0:
        return shift(scale(b, -1.0), a)
    _same_shape("sub", a, b)
    return _emit("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def shift(x, c) -> Tensor:
    """x + c for a scalar tensor c."""
    x, c = as_tensor(x), as_tensor(c)
    return _emit("shift", x.values + c.values, (x, c), lambda g: (g, np.sum(g).reshape(c.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.values.ndim == 0 and not b.requires_grad:
        return scale(a, float(b.values))
    if a.values.ndim == 0 and not a.requires_grad:
        return scale(b, float(a.values))
    if a.values.ndim == 0 or b.values.ndim == 0:
        s, t = (a, b) if a.values.ndim == 0 else (b, a)

        def vjp_s(g):
            gs = np.sum(g * t.values).reshape(())
            gt = g * s.values
            return (gs, gt) if s is a else (gt, gs)

        return _emit("mul", a.values * b.values, (a, b), vjp_s)
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit("scale", x.values * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return _emit("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.values)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    """Natural log of max(x, 1e-12); zero gradient where the floor is active."""
    x = as_tensor(x)
    live = x.values > LOG_FLOOR
    safe = np.where(live, x.values, LOG_FLOOR)
    return _emit("log", np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.values)
    return _emit("abs", np.abs(x.values), (x,), lambda g: (g * sign,))


def softmax(x) -> Tensor:
    """Row-wise softmax of an n x c matrix (max-subtracted)."""
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"softmax expects a matrix, got {x.shape}")
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax", y, (x,), vjp)


def total(x) -> Tensor:
    """Sum of all elements."""
    x = as_tensor(x)
    shape = x.shape
    return _emit("sum", np.sum(x.values).reshape(()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    shape = x.shape
    return _emit("mean", np.mean(x.values).reshape(()), (x,), lambda g: (np.full(shape, float(g) / n),))


def row_sum(x) -> Tensor:
    """Sum across columns: n x c -> n x 1."""
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"row_sum expects a matrix, got {x.shape}")
    cols = x.shape[1]
    return _emit("row_sum", x.values.sum(axis=1, keepdims=True), (x,),
                 lambda g: (np.repeat(g, cols, axis=1),))


def row_mean(x) -> Tensor:
    """Mean across columns: n x c -> n x 1."""
    x = as_tensor(x)
    return scale(row_sum(x), 1.0 / x.shape[1])


def concat(a, b) -> Tensor:
    """Column-wise concatenation of two matrices with equal row counts."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat: row counts differ ({a.shape} vs {b.shape})")
    p = a.shape[1]
    return _emit("concat", np.concatenate([a.values, b.values], axis=1), (a, b),
                 lambda g: (g[:, :p], g[:, p:]))


def grad_reverse(x, multiplier: float = -1.0) -> Tensor:
    """Identity on the forward pass; scales the incoming gradient by ``multiplier``."""
    x = as_tensor(x)
    return _emit("grad_reverse", x.values.copy(), (x,), lambda g: (g * multiplier,))


def pool_bins(n: int, length: int) -> list[tuple[int, int]]:
    """Half-open index ranges [floor(j n / L), floor((j+1) n / L))."""
    if length < 1 or n < length:
        raise ContractError(f"adaptive pooling needs n >= L >= 1, got n={n}, L={length}")
    return [((j * n) // length, ((j + 1) * n) // length) for j in range(length)]


def adaptive_pool(x, length: int, mode: str = "average") -> Tensor:
    """Pool each row of an n x w matrix down to ``length`` columns."""
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"adaptive_pool expects a matrix, got {x.shape}")
    rows, width = x.shape
    bins = pool_bins(width, length)
    v = x.values
    if mode == "average":
        if width == length:
            return _emit("adaptive_pool", v.copy(), (x,), lambda g: (g,))
        out = np.stack([v[:, s:e].mean(axis=1) for s, e in bins], axis=1)

        def vjp(g):
            gx = np.zeros_like(v)
            for j, (s, e) in enumerate(bins):
                gx[:, s:e] = g[:, j:j + 1] / (e - s)
            return (gx,)

        return _emit("adaptive_pool", out, (x,), vjp)
    if mode == "max":
        # np.argmax returns the first maximum: lowest index wins ties
        idx = np.stack([s + np.argmax(v[:, s:e], axis=1) for s, e in bins], axis=1)
        r = np.arange(rows)[:, None]
        out = v[r, idx]

        def vjp(g):
            gx = np.zeros_like(v)
            np.add.at(gx, (np.broadcast_to(r, idx.shape), idx), g)
            return (gx,)

        return _emit("adaptive_pool", out, (x,), vjp)
    raise ContractError(f"unknown pooling mode {mode!r}")


# ---------------------------------------------------------------- checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"grad_check {verdict}: max rel error {self.max_rel_error:.3e} at {self.worst_index}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor): relative for large entries, absolute near zero."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(x)).item()
        flat[i] = orig - step
        lo = f(Tensor(x)).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return out


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    leaf = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = f(leaf)
        if not loss.requires_grad:
            return np.zeros_like(leaf.values)
        backward(tape, loss)
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)


def grad_check(f: Callable[[Tensor], Tensor], x, tol: float = 1e-5, step: float = 1e-6,
               floor: float = 1e-3) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    A mismatch is reported, never raised.
    """
    x = np.array(x, dtype=np.float64)
    a = analytic_gradient(f, x)
    n = numeric_gradient(f, x, step)
    err = relative_error(a, n, floor)
    worst = int(np.argmax(err)) if err.size else 0
    max_err = float(err.reshape(-1)[worst]) if err.size else 0.0
    return GradCheckReport(bool(max_err < tol), max_err, worst, a, n)
