"""Dense rank-2 tensors with tape-based reverse-mode differentiation.

Everything is float64 and at most two-dimensional. A vector is an ``n x 1``
column; token sequences are matrices with one token per row. Operations record
a node only when at least one input requires a gradient, so frozen tensors and
constants never enter the tape.

Example::

    x = Tensor([[1.0], [2.0]], requires_grad=True)
    loss = sum_all(x * x)
    backward(loss)
    x.grad  # [[2.], [4.]]
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, EmptyInputError, NumericDomainError, ShapeError

COS_EPS = 1e-12
LOG_CLAMP = 1e-12

_GRAD_ENABLED = True


class no_grad:
    """Context manager that stops operations from recording graph nodes."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


def _as_2d(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim > 2:
        raise ShapeError(f"rank-{arr.ndim} data is not supported (max rank 2)")
    return arr


class Tensor:
    """A 2-D float64 array, optionally carrying a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, *, _copy: bool = True):
        self.data = _as_2d(data) if _copy else data
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data, _copy=False)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", back)


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a python scalar."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        s = float(b)
        a = _lift(a)
        return _node(a.data * s, (a,), "scale", lambda g: _accum(a, g * s))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", back)


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), "square", lambda g: _accum(a, 2.0 * a.data * g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), "tanh", lambda g: _accum(a, g * (1.0 - y * y)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), "exp", lambda g: _accum(a, g * y))


def log(a: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log with the argument clamped from below; no gradient through the clamp."""
    x = np.maximum(a.data, clamp)
    live = a.data > clamp

    def back(g):
        _accum(a, np.where(live, g / x, 0.0))

    return _node(np.log(x), (a,), "log", back)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")

    def back(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", back)


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T.copy(), (a,), "transpose", lambda g: _accum(a, g.T))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    """Row-major reshape."""
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    shp = a.shape
    return _node(a.data.reshape(rows, cols).copy(), (a,), "reshape",
                 lambda g: _accum(a, g.reshape(shp)))


def flatten(a: Tensor) -> Tensor:
    """Row-major vectorisation into an ``n x 1`` column."""
    return reshape(a, a.data.size, 1)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")

    def back(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full)

    return _node(a.data[start:stop].copy(), (a,), "slice_rows", back)


def select_col(a: Tensor, j: int) -> Tensor:
    if not 0 <= j < a.shape[1]:
        raise ShapeError(f"select_col: column {j} out of range for {a.shape}")

    def back(g):
        full = np.zeros_like(a.data)
        full[:, j:j + 1] = g
        _accum(a, full)

    return _node(a.data[:, j:j + 1].copy(), (a,), "select_col", back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack along rows; for column vectors this is ``[a ; b]``."""
    parts = [_lift(p) for p in parts]
    widths = {p.shape[1] for p in parts if p.data.size}
    if len(widths) > 1:
        raise ShapeError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    if not widths:
        return Tensor(np.zeros((0, 1)))
    parts = [p for p in parts if p.data.size]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[lo:hi])

    return _node(np.vstack([p.data for p in parts]), parts, "concat_rows", back)


def concat(a, b) -> Tensor:
    """Vector concatenation ``[a ; b]`` (first argument on top)."""
    return concat_rows([_lift(a), _lift(b)])


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    heights = {p.shape[0] for p in parts}
    if len(heights) > 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[:, lo:hi])

    return _node(np.hstack([p.data for p in parts]), parts, "concat_cols", back)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    shp = a.shape
    return _node(np.array([[a.data.sum()]]), (a,), "sum",
                 lambda g: _accum(a, np.full(shp, g[0, 0])))


def mean_rows(m: Tensor) -> Tensor:
    """Column-wise mean of an ``m x n`` matrix, returned as an ``n x 1`` vector."""
    rows = m.shape[0]
    if rows == 0:
        raise EmptyInputError("mean_rows of a matrix with zero rows")

    def back(g):
        _accum(m, np.broadcast_to(g.T / rows, m.shape))

    return _node(m.data.mean(axis=0).reshape(-1, 1), (m,), "mean_rows", back)


def softmax_rows(s: Tensor) -> Tensor:
    z = s.data - s.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        _accum(s, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _node(p, (s,), "softmax_rows", back)


def norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries; the subgradient at zero is taken as zero."""
    n = float(np.sqrt((a.data * a.data).sum()))

    def back(g):
        if n > 0.0:
            _accum(a, g[0, 0] * a.data / n)
        else:
            _accum(a, np.zeros_like(a.data))

    return _node(np.array([[n]]), (a,), "norm", back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.size != b.data.size:
        raise ShapeError(f"dot: lengths differ, {a.shape} vs {b.shape}")
    av, bv = a.data.reshape(-1), b.data.reshape(-1)

    def back(g):
        _accum(a, g[0, 0] * b.data.reshape(a.shape))
        _accum(b, g[0, 0] * a.data.reshape(b.shape))

    return _node(np.array([[av @ bv]]), (a, b), "dot", back)


def cosine(a, b, eps: float = COS_EPS) -> Tensor:
    """``a.b / (|a| |b| + eps)`` as a 1x1 tensor."""
    a, b = _lift(a), _lift(b)
    if a.data.size != b.data.size:
        raise ShapeError(f"cosine: lengths differ, {a.shape} vs {b.shape}")
    av, bv = a.data.reshape(-1), b.data.reshape(-1)
    na, nb = math.sqrt(av @ av), math.sqrt(bv @ bv)
    d = av @ bv
    den = na * nb + eps
    c = d / den

    def back(g):
        gg = g[0, 0]
        if a.requires_grad:
            ga = bv / den
            if na > 0.0:
                ga = ga - d * nb * av / (na * den * den)
            _accum(a, gg * ga.reshape(a.shape))
        if b.requires_grad:
            gb = av / den
            if nb > 0.0:
                gb = gb - d * na * bv / (nb * den * den)
            _accum(b, gg * gb.reshape(b.shape))

    return _node(np.array([[c]]), (a, b), "cosine", back)


def cosine_value(a, b, eps: float = COS_EPS) -> float:
    """Plain-float cosine, for callers that do not need a graph."""
    av = np.asarray(a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b, dtype=np.float64).reshape(-1)
    if av.size != bv.size:
        raise ShapeError(f"cosine: lengths differ, {av.size} vs {bv.size}")
    return float(av @ bv / (math.sqrt(av @ av) * math.sqrt(bv @ bv) + eps))


# ---------------------------------------------------------------------------
# reverse pass


class ComputationTape:
    """Topologically ordered nodes reachable from a scalar loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, tape: ComputationTape | None = None) -> ComputationTape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf.

    Intermediate gradients are released once consumed, so only leaves keep
    their ``.grad`` afterwards.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return ComputationTape([])
    if tape is None:
        tape = ComputationTape.from_loss(loss)
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        if node.backward_fn is None:
            continue
        g = node.grad
        if g is not None:
            node.backward_fn(g)
        node.grad = None
    return tape


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    *,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the graph from the current values of ``params`` on every
    call. With ``max_coords`` set, each parameter contributes at most that many
    randomly chosen coordinates.
    """
    if eps <= 0:
        raise ContractError("grad_check needs eps > 0")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.zero_grad()
    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericDomainError(f"non-finite objective while probing coordinate {i}")
            num = (fp - fm) / (2.0 * eps)
            an = ga.reshape(-1)[i]
            err = abs(an - num) / max(1e-8, abs(an) + abs(num))
            worst = max(worst, err)
    return worst


def check_finite(t: Tensor | np.ndarray, where: str) -> None:
    arr = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(arr)):
        raise NumericDomainError(f"non-finite values in {where}")
