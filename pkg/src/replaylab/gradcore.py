"""Small reverse-mode autodiff engine over dense float64 matrices.

Every value is a 2-D ``numpy`` array.  Operations build a tape of
:class:`Node` objects; :func:`backward` walks it in reverse topological
order and accumulates ``dloss/dnode`` into ``node.grad``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-12
GEM_EPS = 1e-6


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


def as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={arr.ndim}")
    return arr


class Node:
    """A matrix value on the tape plus its gradient accumulator."""

    __slots__ = ("value", "_grad", "op", "parents", "requires_grad", "_vjp", "name")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Node"] = (), vjp: Callable | None = None,
                 name: str | None = None):
        self.value = as_matrix(value)
        self._grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self._vjp = vjp
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on a {self.shape} node")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def make_node(value, op: str, parents: Sequence[Node], vjp: Callable) -> Node:
    """Record a custom primitive; ``vjp(g)`` returns one gradient per parent."""
    needs = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=needs, op=op, parents=parents,
                vjp=vjp if needs else None)


_make = make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), vjp)


def transpose(a) -> Node:
    a = _lift(a)
    return _make(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, "mul", (a, b), vjp)


def scale(a, c: float) -> Node:
    a = _lift(a)
    c = float(c)
    return _make(a.value * c, "scale", (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Node:
    a = _lift(a)
    return _make(a.value + float(c), "add_scalar", (a,), lambda g: (g,))


def relu(a) -> Node:
    a = _lift(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def hinge(a) -> Node:
    """max(0, x), kept as its own tag so loss tapes read clearly."""
    a = _lift(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), "hinge", (a,), lambda g: (g * mask,))


def power(a, p: float) -> Node:
    a = _lift(a)
    av = a.value
    p = float(p)
    return _make(av ** p, "power", (a,), lambda g: (g * p * av ** (p - 1.0),))


def mean_rows(a) -> Node:
    """Row-wise mean: [n x d] -> [n x 1]."""
    a = _lift(a)
    d = a.shape[1]
    return _make(a.value.mean(axis=1, keepdims=True), "mean_rows", (a,),
                 lambda g: (np.broadcast_to(g / d, a.shape).copy(),))


def mean_all(a) -> Node:
    a = _lift(a)
    n = a.value.size
    if n == 0:
        raise ShapeError("mean_all of an empty matrix")
    shape = a.shape
    return _make(np.array([[a.value.mean()]]), "mean_all", (a,),
                 lambda g: (np.full(shape, g[0, 0] / n),))


def sum_all(a) -> Node:
    a = _lift(a)
    shape = a.shape
    return _make(np.array([[a.value.sum()]]), "sum_all", (a,),
                 lambda g: (np.full(shape, g[0, 0]),))


def sqdiff(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.value, b.value, "sqdiff")
    diff = a.value - b.value
    sa, sb = a.shape, b.shape

    def vjp(g):
        gd = 2.0 * g * diff
        return _unbroadcast(gd, sa), -_unbroadcast(gd, sb)

    return _make(diff * diff, "sqdiff", (a, b), vjp)


def l2_normalize(a) -> Node:
    """Scale every row to unit L2 norm, dividing by max(norm, 1e-12)."""
    a = _lift(a)
    norms = np.sqrt((a.value ** 2).sum(axis=1, keepdims=True))
    safe = np.maximum(norms, NORM_EPS)
    y = a.value / safe
    active = norms > NORM_EPS

    def vjp(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(active, (g - y * proj) / safe, g / safe),)

    return _make(y, "l2_normalize", (a,), vjp)


def detach(a) -> Node:
    """Constant copy of ``a``: gradient stops here."""
    return Node(_lift(a).value, requires_grad=False, op="detach")


def take(a, rows, cols) -> Node:
    """Gather ``a[rows[k], cols[k]]`` into a [k x 1] column."""
    a = _lift(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return _make(a.value[rows, cols].reshape(-1, 1), "take", (a,), vjp)


def select_rows(a, idx) -> Node:
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], "select_rows", (a,), vjp)


def concat_rows(parts: Sequence) -> Node:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows of nothing")
    d = parts[0].shape[1]
    if any(p.shape[1] != d for p in parts):
        raise ShapeError("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.vstack([p.value for p in parts]), "concat_rows", parts, vjp)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Node:
    """1-D batch norm over rows.  Train mode updates the running arrays in place."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    n, d = x.shape
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"batch_norm: affine params must be (1, {d})")
    if train:
        if n < 2:
            raise ValueError("batch_norm in train mode needs batch size >= 2")
        mu = x.value.mean(axis=0, keepdims=True)
        var = x.value.var(axis=0, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv_std
    gv = gamma.value

    def vjp(g):
        dxhat = g * gv
        if train:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
        else:
            dx = dxhat * inv_std
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _make(xhat * gv + beta.value, "batch_norm", (x, gamma, beta), vjp)


def gem_pool_segments(x, lengths: Sequence[int], p: float = 3.0) -> Node:
    """Generalized-mean pooling of consecutive row blocks.

    ``x`` stacks the per-point features of several point sets; block ``k``
    holds ``lengths[k]`` rows.  Output row ``k`` is
    ``(mean_i x_ik^p) ** (1/p)`` column-wise.  Inputs are clamped to
    ``GEM_EPS`` from below so the root stays differentiable.
    """
    x = _lift(x)
    lengths = np.asarray(lengths, dtype=np.intp)
    if p < 1:
        raise ValueError(f"GeM exponent must be >= 1, got {p}")
    if lengths.size == 0 or np.any(lengths < 1):
        raise ValueError("GeM pooling needs at least one point per set")
    if lengths.sum() != x.shape[0]:
        raise ShapeError("GeM segment lengths do not cover the input rows")
    if np.any(x.value < 0):
        raise ValueError("GeM pooling requires non-negative features")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    xc = np.maximum(x.value, GEM_EPS)
    live = x.value > GEM_EPS
    xp = xc ** p
    m = np.add.reduceat(xp, starts, axis=0) / lengths[:, None]
    y = m ** (1.0 / p)

    def vjp(g):
        # dy/dx = y^(1-p) x^(p-1) / n within each block
        coef = g * y ** (1.0 - p) / lengths[:, None]
        return (np.repeat(coef, lengths, axis=0) * xc ** (p - 1.0) * live,)

    return _make(y, "gem_pool", (x,), vjp)


def gem_pool(x, p: float = 3.0) -> Node:
    """Generalized-mean pooling of one point set: [n x d] -> [1 x d]."""
    x = _lift(x)
    if x.shape[0] == 0:
        raise ValueError("GeM pooling of an empty point set")
    return gem_pool_segments(x, [x.shape[0]], p)


# ---------------------------------------------------------------- backward


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate ``d loss / d node`` into ``.grad`` of every node on the tape."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    grads = {id(loss): np.ones((1, 1))}
    order = _topo_order(loss)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        g = grads.get(id(node))
        if g is not None:
            node._grad = g if node._grad is None else node._grad + g


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()
