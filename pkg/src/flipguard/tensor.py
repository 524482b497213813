"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation in the package (models, losses, attacks) is
built from the primitives defined here. A primitive computes its forward
value with numpy and, when any input requires a gradient, records a node
holding its parents and a backward closure. :func:`backward` replays those
nodes in reverse creation order.

Subgradient conventions at kinks are fixed: ``relu'(0) = 0``, ``sign' = 0``
and ``clamp' = 1`` strictly inside ``(lo, hi)`` and ``0`` elsewhere.

Broadcasting is limited to scalar-with-tensor and row-vector bias addition
(``(n, k)`` with ``(k,)``); anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "relu",
    "exp",
    "log",
    "sum",
    "mean",
    "amax",
    "logsumexp",
    "log_softmax",
    "softmax",
    "sqnorm",
    "sign",
    "clamp",
    "gather",
    "backward",
    "grad",
    "finite_difference_grad",
]

_seq = itertools.count()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(eq=False)
class Node:
    kind: str
    parents: tuple["Tensor", ...]
    forward: Callable[..., np.ndarray]
    backward: Callable[[np.ndarray], tuple]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """A float64 array with an optional gradient slot.

    ``data`` keeps its numpy shape; ``grad`` is filled by :func:`backward`
    for leaves created with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"expected a scalar tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind, inputs, out_data, forward, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(kind, tuple(inputs), forward, backward_fn)
    return out


# -- broadcasting helpers ----------------------------------------------------


def _check_binary(kind: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.data.ndim <= 1 or b.size == 1 and b.data.ndim <= 1:
        return
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return
    if len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0]:
        return
    raise ShapeError(f"{kind}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.array(g.sum()).reshape(shape)
    # row-vector bias
    return g.sum(axis=0).reshape(shape)


def _binary_out_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    return np.broadcast_shapes(a.shape, b.shape)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)

    def fwd(x, y):
        return x + y

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), fwd(a.data, b.data), fwd, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a, b)

    def fwd(x, y):
        return x - y

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), fwd(a.data, b.data), fwd, bwd)


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)

    def fwd(x, y):
        return x * y

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), fwd(a.data, b.data), fwd, bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: zero denominator")

    def fwd(x, y):
        return x / y

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record("div", (a, b), fwd(a.data, b.data), fwd, bwd)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def scale(a, s: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = _as_tensor(a)
    s = float(s)

    def fwd(x):
        return s * x

    def bwd(g):
        return (s * g,)

    return _record("scale", (a,), fwd(a.data), fwd, bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)

    def fwd(x):
        return np.where(x > 0, x, 0.0)

    def bwd(g):
        return (np.where(a.data > 0, g, 0.0),)

    return _record("relu", (a,), fwd(a.data), fwd, bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    if not np.all(np.isfinite(out_data)):
        raise DomainError("exp: overflow, result not finite")

    def bwd(g):
        return (g * out_data,)

    return _record("exp", (a,), out_data, np.exp, bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")

    def bwd(g):
        return (g / a.data,)

    return _record("log", (a,), np.log(a.data), np.log, bwd)


def sign(a) -> Tensor:
    """Elementwise sign; zero derivative everywhere."""
    a = _as_tensor(a)

    def bwd(g):
        return (np.zeros_like(a.data),)

    return _record("sign", (a,), np.sign(a.data), np.sign, bwd)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    if not lo <= hi:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")

    def fwd(x):
        return np.minimum(np.maximum(x, lo), hi)

    def bwd(g):
        inside = (a.data > lo) & (a.data < hi)
        return (np.where(inside, g, 0.0),)

    return _record("clamp", (a,), fwd(a.data), fwd, bwd)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), np.matmul(a.data, b.data), np.matmul, bwd)


# -- reductions --------------------------------------------------------------


def _expand(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)

    def fwd(x):
        return np.sum(x, axis=axis)

    def bwd(g):
        return (np.array(_expand(g, a.shape, axis)),)

    return _record("sum", (a,), fwd(a.data), fwd, bwd)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")

    def fwd(x):
        return np.sum(x, axis=axis) / count

    def bwd(g):
        return (np.array(_expand(g, a.shape, axis)) / count,)

    return _record("mean", (a,), fwd(a.data), fwd, bwd)


def amax(a, axis: int = -1) -> Tensor:
    """Max over one axis. The gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    axis = axis % a.data.ndim

    def fwd(x):
        return np.max(x, axis=axis)

    def bwd(g):
        idx = np.argmax(a.data, axis=axis)
        mask = np.zeros_like(a.data)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
        return (mask * np.expand_dims(g, axis),)

    return _record("amax", (a,), fwd(a.data), fwd, bwd)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Overflow-safe ``log(sum(exp(a)))`` along ``axis``."""
    a = _as_tensor(a)
    axis = axis % a.data.ndim

    def fwd(x):
        return _lse(x, axis)

    def bwd(g):
        return (_softmax(a.data, axis) * np.expand_dims(g, axis),)

    return _record("logsumexp", (a,), fwd(a.data), fwd, bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.data.ndim
    lse = logsumexp(a, axis)
    if a.data.ndim == 1:
        return sub(a, lse)
    # (n, c) minus per-row constant: route through a column broadcast
    return _sub_rows(a, lse)


def _sub_rows(a: Tensor, v: Tensor) -> Tensor:
    def fwd(x, y):
        return x - y[:, None]

    def bwd(g):
        return g, -g.sum(axis=1)

    return _record("sub", (a, v), fwd(a.data, v.data), fwd, bwd)


def softmax(a, axis: int = -1) -> np.ndarray:
    """Forward-only softmax (probabilities sum to one along ``axis``)."""
    a = _as_tensor(a)
    return _softmax(a.data, axis % a.data.ndim)


def sqnorm(a, axis: int | None = None) -> Tensor:
    """Squared Euclidean norm, over everything or along one axis."""
    a = _as_tensor(a)

    def fwd(x):
        return np.sum(x * x, axis=axis)

    def bwd(g):
        return (2.0 * a.data * _expand(g, a.shape, axis),)

    return _record("sqnorm", (a,), fwd(a.data), fwd, bwd)


def gather(a, index) -> Tensor:
    """Pick one entry per row: ``out[i] = a[i, index[i]]`` (or ``a[index]`` for 1-D)."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim == 1:
        if index.ndim != 0:
            raise ShapeError(f"gather: 1-D input {a.shape} needs a scalar index, got {index.shape}")
    elif a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"gather: incompatible shapes {a.shape} and {index.shape}")

    rows = None if a.data.ndim == 1 else np.arange(a.shape[0])

    def fwd(x):
        return x[index] if rows is None else x[rows, index]

    def bwd(g):
        out = np.zeros_like(a.data)
        if rows is None:
            out[index] = g
        else:
            out[rows, index] = g
        return (out,)

    return _record("gather", (a,), fwd(a.data), fwd, bwd)


# -- tape and reverse sweep --------------------------------------------------


class Tape:
    """Ordered record of the primitive applications behind one output.

    Nodes are kept in creation order, so every node's inputs precede it.
    """

    def __init__(self, nodes: Sequence[Tensor]):
        self.nodes = list(nodes)

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.parents)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for t in self.nodes:
            for p in t._node.parents:
                if p._node is None and p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every node forward from the current leaf values."""
        values: dict[int, np.ndarray] = {}
        for t in self.nodes:
            args = [values.get(id(p), p.data) for p in t._node.parents]
            values[id(t)] = t._node.forward(*args)
        return values


def _sweep(output: Tensor, tape: Tape | None) -> dict[int, np.ndarray]:
    if output.data.size != 1:
        raise ValueError(f"backward: output must be scalar, got shape {output.shape}")
    tape = tape if tape is not None else Tape.trace(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t._node.parents, t._node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64).reshape(parent.shape)
    return grads


def backward(output: Tensor, tape: Tape | None = None) -> None:
    """Fill ``.grad`` on every leaf reachable from the scalar ``output``.

    Leaves that require a gradient but were not reached keep their previous
    ``.grad``; use :func:`grad` to get zeros for those instead.
    """
    tape = tape if tape is not None else Tape.trace(output)
    grads = _sweep(output, tape)
    if output._node is None and output.requires_grad:
        output.grad = np.ones_like(output.data)
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else g


def grad(output: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    A tensor absent from the output's history gets a zero gradient.
    """
    wrt = list(wrt)
    if output._node is None:
        if output.data.size != 1:
            raise ValueError(f"backward: output must be scalar, got shape {output.shape}")
        return [np.ones_like(w.data) if w is output else np.zeros_like(w.data) for w in wrt]
    grads = _sweep(output, None)
    return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


def finite_difference_grad(
    scalar_fn: Callable[[np.ndarray], float], point, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``point``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(scalar_fn(x.copy()))
        flat[i] = orig - h
        down = float(scalar_fn(x.copy()))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(x.shape)
