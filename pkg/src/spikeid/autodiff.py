"""Small define-by-run reverse-mode autodiff engine on top of numpy.

Operations executed inside a ``with Tape() as tape:`` block are recorded
whenever one of their inputs requires a gradient; ``backward`` then walks
the record in reverse.  Elementwise ops follow numpy broadcasting, and the
backward pass sums gradients back down to each input's shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN/Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by '{op}'"
        super().__init__(msg + (f": {detail}" if detail else ""))


class TapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class SurrogateConfig:
    """Fast-sigmoid surrogate slope."""

    alpha: float = 25.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("surrogate slope alpha must be > 0")


_ACTIVE: list["Tape"] = []


class Tensor:
    """float64 array with optional gradient tracking."""

    __slots__ = ("values", "requires_grad", "grad", "_node")
    __array_priority__ = 1000

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf", "leaf tensors must be finite")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = None

    @classmethod
    def _result(cls, values: np.ndarray, op: str) -> "Tensor":
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(op)
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor._result(self.values, "detach")

    def __repr__(self):
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{g})"

    def __len__(self):
        return len(self.values)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None):
        return backward(loss, self, params)


def _record(op: str, inputs: Sequence[Tensor], out: Tensor, fn: Callable):
    if not _ACTIVE or not any(t.requires_grad for t in inputs):
        return out
    tape = _ACTIVE[-1]
    if tape.consumed:
        raise TapeError("tape already consumed by backward(); open a new Tape")
    out.requires_grad = True
    out._node = _Node(op, tuple(inputs), out, fn)
    tape.nodes.append(out._node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- primitives -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    out = Tensor._result(a.values + b.values, "add")
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    out = Tensor._result(a.values - b.values, "sub")
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product; a Python scalar operand gives scalar multiply."""
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    out = Tensor._result(a.values * b.values, "mul")
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.values, a.shape),
                              _unbroadcast(g * a.values, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = a.values / b.values
    out = Tensor._result(v, "div")
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / b.values, a.shape),
                              _unbroadcast(-g * v / b.values, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product; covers matrix-vector and batched row-vector cases."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim == 0 or b.values.ndim == 0:
        raise ShapeError("matmul: scalar operand")
    if a.shape[-1] != b.shape[0 if b.values.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor._result(a.values @ b.values, "matmul")

    def bw(g):
        av, bv = a.values, b.values
        if bv.ndim == 1:
            if av.ndim == 1:
                return g * bv, g * av
            ga = np.multiply.outer(g, bv)
            gb = np.tensordot(g, av, axes=(tuple(range(g.ndim)), tuple(range(av.ndim - 1))))
            return ga, gb
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return ga, _unbroadcast(gb, bv.shape)

    return _record("matmul", (a, b), out, bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    v = np.tanh(a.values)
    out = Tensor._result(v, "tanh")
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - v * v),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        v = np.exp(a.values)
    out = Tensor._result(v, "exp")
    return _record("exp", (a,), out, lambda g: (g * v,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(a.values)
    out = Tensor._result(v, "log")
    return _record("log", (a,), out, lambda g: (g / a.values,))


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._result(a.values * a.values, "square")
    return _record("square", (a,), out, lambda g: (2.0 * a.values * g,))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = Tensor._result(np.asarray(a.values.sum(axis=axis)), "sum")

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = Tensor._result(np.asarray(a.values.mean(axis=axis)), "mean")

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record("mean", (a,), out, bw)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = Tensor._result(np.array(a.values[idx]), "getitem")

    def bw(g):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        return (full,)

    return _record("getitem", (a,), out, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        v = np.stack([t.values for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: {e}") from None
    out = Tensor._result(v, "stack")

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _record("stack", ts, out, bw)


def clamp_norm(a, max_norm: float) -> Tensor:
    """Rescale ``a`` so its L2 norm is at most ``max_norm``."""
    a = as_tensor(a)
    n = float(np.sqrt(np.sum(a.values ** 2)))
    if n <= max_norm:
        out = Tensor._result(a.values.copy(), "clamp_norm")
        return _record("clamp_norm", (a,), out, lambda g: (g,))
    s = max_norm / n
    v = a.values * s
    out = Tensor._result(v, "clamp_norm")
    u = a.values / n

    def bw(g):
        # d(c x/|x|) = c/|x| (I - u u^T)
        return (s * (g - u * np.sum(u * g)),)

    return _record("clamp_norm", (a,), out, bw)


def spike_threshold(x, cfg: SurrogateConfig = SurrogateConfig()) -> Tensor:
    """Heaviside step (1 at x >= 0) with a fast-sigmoid surrogate gradient."""
    x = as_tensor(x)
    out = Tensor._result((x.values >= 0.0).astype(np.float64), "spike_threshold")
    alpha = cfg.alpha

    def bw(g):
        return (g / (1.0 + alpha * np.abs(x.values)) ** 2,)

    return _record("spike_threshold", (x,), out, bw)


def surrogate_factor(x, alpha: float = 25.0) -> np.ndarray:
    return 1.0 / (1.0 + alpha * np.abs(np.asarray(x, dtype=np.float64))) ** 2


def custom_op(op: str, inputs: Sequence[Tensor], values: np.ndarray,
              backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Record a fused operation with a hand-written backward rule."""
    out = Tensor._result(np.asarray(values, dtype=np.float64), op)
    return _record(op, tuple(inputs), out, backward_fn)


# -- reverse pass -----------------------------------------------------------


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> dict:
    """Propagate d(loss) back through ``tape``.

    Sets ``.grad`` on every leaf reached (and on every tensor in ``params``,
    zero if it never influenced the loss).  Returns ``{id(leaf): grad}``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("double backward is not supported; the tape was consumed")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
            if t._node is None:
                leaves[key] = t
    if loss._node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    out = {}
    for key, t in leaves.items():
        t.grad = np.broadcast_to(grads[key], t.shape).copy()
        out[key] = t.grad
    if params is not None:
        for p in params:
            if id(p) not in out:
                p.grad = np.zeros_like(p.values)
                out[id(p)] = p.grad
    tape.nodes = []
    return out
