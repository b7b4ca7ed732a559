"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every primitive returns a new :class:`Tensor` holding a closure that maps the
output gradient to input gradients.  ``backward`` walks the recorded graph in
reverse topological order.  Graphs are rebuilt on every forward pass.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), fn, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]}) for shapes {a.shape} @ {b.shape}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            # weight gradient: fold the batch dims into one GEMM
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), fn, "matmul")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU (smooth everywhere)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), fn, "gelu")


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is an additive constant (use -inf to block)."""
    a = as_tensor(a)
    z = a.data if mask is None else a.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), fn, "softmax")


LN_EPS = 1e-5


def layer_norm(a, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, no affine terms."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), fn, "layer_norm")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_norm(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    nrm = np.sqrt((x * x).sum())

    def fn(g):
        return (g * x / nrm if nrm > 0 else np.zeros_like(x),)

    return _make(np.asarray(nrm), (a,), fn, "l2_norm")


def embed(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"embed: ids must lie in [0, {n}), got range [{ids.min()}, {ids.max()}]")

    def fn(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), fn, "embed")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        out = []
        for i in range(len(ts)):
            idx = [slice(None)] * nd
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), fn, "concat")


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}") from exc
    shape = a.shape

    def fn(g):
        ga = np.zeros(shape)
        if _is_advanced(index):
            np.add.at(ga, index, g)
        else:
            ga[index] = g
        return (ga,)

    return _make(np.array(out), (a,), fn, "slice")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def separable(x, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply ``rows @ X @ cols.T`` to every channel of a (..., H, W, C) array."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"separable: expected (..., H, W, C), got {x.shape}")
    H, W = x.shape[-3], x.shape[-2]
    if rows.shape[1] != H or cols.shape[1] != W:
        raise ShapeError(
            f"separable: operator shapes {rows.shape}, {cols.shape} do not fit image {H}x{W}"
        )
    out = np.einsum("ij,...jkc,lk->...ilc", rows, x.data, cols, optimize=True)

    def fn(g):
        return (np.einsum("ij,...ilc,lk->...jkc", rows, g, cols, optimize=True),)

    return _make(out, (x,), fn, "separable")


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "gelu": gelu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "sum": sum_,
    "mean": mean,
    "l2_norm": l2_norm,
    "embed": embed,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "separable": separable,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------------
# graph + backward


@dataclass
class Graph:
    """Nodes reachable from a root, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns a map from ``id(leaf)`` to its gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[int, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                g = np.zeros_like(node.data) if g is None else g
                node.grad = g if node.grad is None else node.grad + g
                result[id(node)] = node.grad
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return result


def grad_of(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> tuple[float, np.ndarray]:
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    loss = fn(x)
    backward(loss)
    return loss.item(), x.grad


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: np.ndarray,
    step: float = 1e-5,
    coords: Iterable[tuple[int, ...]] | None = None,
    n_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autodiff and central differences.

    With ``n_coords`` set, that many coordinates are sampled uniformly; with
    ``coords`` they are given explicitly; otherwise every coordinate is checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=np.float64)
    _, g = grad_of(fn, point)
    if coords is None:
        flat = np.arange(point.size)
        if n_coords is not None and n_coords < point.size:
            flat = np.random.default_rng(seed).choice(point.size, size=n_coords, replace=False)
        coords = [np.unravel_index(i, point.shape) for i in flat]
    worst = 0.0
    with no_grad():
        for c in coords:
            c = tuple(int(i) for i in c)
            xp = point.copy()
            xp[c] += step
            xm = point.copy()
            xm[c] -= step
            fd = (fn(Tensor(xp)).item() - fn(Tensor(xm)).item()) / (2 * step)
            err = abs(g[c] - fd) / (abs(fd) + 1e-12)
            worst = max(worst, err)
    return worst
