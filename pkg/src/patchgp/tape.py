"""Reverse-mode gradient engine over numpy arrays.

Values are computed eagerly; every differentiable operation records a node
on a Tape with vector-Jacobian closures for its parents. backward() replays
the tape in reverse creation order, which is a valid topological order by
construction. The primitive set is closed: matmul, cholesky and triangular
solves (registered by the linear-algebra module), elementwise arithmetic,
exp/log/sqrt/softplus/log_ndtr, reductions, reshaping/indexing, and the
sliding-window correlation (registered by the image module).

Everything is float64. Operations accept either Node or plain array inputs;
with no Node among the inputs they return a plain array, so the same model
code serves both training and evaluation.
"""

from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np
from scipy import special as _sp

from .errors import NonScalarSeed

Array = np.ndarray


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _register(self, node: "Node") -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def leaf(self, value: Any, name: str = "") -> "Node":
        """Create a differentiable input node."""
        return Node(self, _asarray(value), (), (), op="leaf", name=name)

    def release(self) -> None:
        """Forget the recorded graph once its gradients have been extracted.

        Every node holds a reference to its tape, so a finished graph is one
        big reference cycle that only the cyclic collector would reclaim; in
        a training loop tapes then pile up until a full collection runs.
        Dropping the node list breaks the cycle so plain reference counting
        frees the step's intermediates as soon as the caller lets go of its
        nodes. backward() on a released tape is invalid.
        """
        self.nodes.clear()


class Node:
    """One tape entry: a value plus links to the nodes that produced it."""

    __slots__ = ("tape", "value", "parents", "vjps", "op", "name", "index")

    def __init__(
        self,
        tape: Tape,
        value: Array,
        parents: tuple["Node", ...],
        vjps: tuple[Callable[[Array], Array], ...],
        op: str = "",
        name: str = "",
    ) -> None:
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.op = op
        self.name = name
        tape._register(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:  # pragma: no cover
        label = f" {self.name}" if self.name else ""
        return f"<Node{label} {self.op} shape={self.value.shape}>"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _asarray(x: Any) -> Array:
    return np.asarray(x, dtype=np.float64)


def value_of(x: Any) -> Array:
    """Underlying array of a Node, or the input coerced to float64."""
    return x.value if isinstance(x, Node) else _asarray(x)


def is_node(x: Any) -> bool:
    return isinstance(x, Node)


def _find_tape(*args: Any) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def stop_gradient(x: Any) -> Array:
    """Value with the tape connection severed."""
    return value_of(x)


def custom_node(
    value: Array,
    parents_vjps: Sequence[tuple[Any, Callable[[Array], Array]]],
    op: str = "custom",
) -> Any:
    """Register an externally computed primitive.

    parents_vjps pairs each differentiable input with its VJP closure;
    non-Node entries are dropped (constants need no gradient). With no Node
    inputs the raw value is returned.
    """
    tracked = [(p, f) for p, f in parents_vjps if isinstance(p, Node)]
    if not tracked:
        return value
    tape = tracked[0][0].tape
    parents = tuple(p for p, _ in tracked)
    vjps = tuple(f for _, f in tracked)
    return Node(tape, value, parents, vjps, op=op)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcasted gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op_name, fwd, vjp_a, vjp_b):
    def op(a, b):
        av, bv = value_of(a), value_of(b)
        out = fwd(av, bv)
        return custom_node(
            out,
            [
                (a, lambda g: _unbroadcast(vjp_a(g, av, bv, out), av.shape)),
                (b, lambda g: _unbroadcast(vjp_b(g, av, bv, out), bv.shape)),
            ],
            op=op_name,
        )

    op.__name__ = op_name
    return op


add = _binary("add", lambda a, b: a + b, lambda g, a, b, o: g, lambda g, a, b, o: g)
sub = _binary("sub", lambda a, b: a - b, lambda g, a, b, o: g, lambda g, a, b, o: -g)
mul = _binary("mul", lambda a, b: a * b, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)
div = _binary(
    "div",
    lambda a, b: a / b,
    lambda g, a, b, o: g / b,
    lambda g, a, b, o: -g * a / (b * b),
)


def neg(x):
    xv = value_of(x)
    return custom_node(-xv, [(x, lambda g: -g)], op="neg")


def matmul(a, b):
    """Matrix product; operands must have ndim >= 2 (batch dims broadcast)."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = np.matmul(av, bv)
    return custom_node(
        out,
        [
            (a, lambda g: _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)),
            (b, lambda g: _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)),
        ],
        op="matmul",
    )


def transpose(x):
    """Swap the last two axes."""
    xv = value_of(x)
    return custom_node(
        np.swapaxes(xv, -1, -2),
        [(x, lambda g: np.swapaxes(g, -1, -2))],
        op="transpose",
    )


def reshape(x, shape):
    xv = value_of(x)
    old = xv.shape
    return custom_node(xv.reshape(shape), [(x, lambda g: g.reshape(old))], op="reshape")


def getitem(x, idx):
    xv = value_of(x)
    out = xv[idx]

    def vjp(g):
        acc = np.zeros_like(xv)
        np.add.at(acc, idx, g)
        return acc

    return custom_node(np.array(out, copy=True), [(x, vjp)], op="getitem")


def concat(parts: Sequence[Any], axis: int = 0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return custom_node(out, [(p, make_vjp(i)) for i, p in enumerate(parts)], op="concat")


def exp(x):
    out = np.exp(value_of(x))
    return custom_node(out, [(x, lambda g: g * out)], op="exp")


def log(x):
    xv = value_of(x)
    return custom_node(np.log(xv), [(x, lambda g: g / xv)], op="log")


def sqrt(x):
    out = np.sqrt(value_of(x))
    return custom_node(out, [(x, lambda g: g * (0.5 / out))], op="sqrt")


def softplus(x):
    """log(1 + exp(x)), stable for large |x|."""
    xv = value_of(x)
    out = np.logaddexp(0.0, xv)
    return custom_node(out, [(x, lambda g: g * _sp.expit(xv))], op="softplus")


def softplus_inverse(y: Array) -> Array:
    """Array-only inverse of softplus: y + log(1 - exp(-y)), stable."""
    y = _asarray(y)
    return y + np.log(-np.expm1(-y))


_LOG_2PI = float(np.log(2.0 * np.pi))


def log_ndtr(x):
    """Log of the standard normal CDF."""
    xv = value_of(x)
    out = _sp.log_ndtr(xv)

    def vjp(g):
        # d/dx log Phi(x) = phi(x) / Phi(x), computed in log space
        return g * np.exp(-0.5 * xv * xv - 0.5 * _LOG_2PI - out)

    return custom_node(out, [(x, vjp)], op="log_ndtr")


def reduce_sum(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy()
        g2 = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % xv.ndim for a in axes)
            shape = [1 if i in axes else s for i, s in enumerate(xv.shape)]
            g2 = g.reshape(shape)
        return np.broadcast_to(g2, xv.shape).copy()

    return custom_node(np.asarray(out, dtype=np.float64), [(x, vjp)], op="reduce_sum")


def clamp_min(x, floor: float):
    """Elementwise max(x, floor); gradient passes where x >= floor."""
    xv = value_of(x)
    out = np.maximum(xv, floor)
    mask = xv >= floor
    return custom_node(out, [(x, lambda g: g * mask)], op="clamp_min")


def diag_part(x):
    """Diagonal of the last two axes."""
    xv = value_of(x)
    out = np.diagonal(xv, axis1=-2, axis2=-1).copy()

    def vjp(g):
        acc = np.zeros_like(xv)
        idx = np.arange(xv.shape[-1])
        acc[..., idx, idx] = g
        return acc

    return custom_node(out, [(x, vjp)], op="diag_part")


def diag_embed(v):
    """Square matrix with v on the diagonal (over the last axis)."""
    vv = value_of(v)
    m = vv.shape[-1]
    out = np.zeros(vv.shape + (m,), dtype=np.float64)
    idx = np.arange(m)
    out[..., idx, idx] = vv
    return custom_node(
        out, [(v, lambda g: np.diagonal(g, axis1=-2, axis2=-1).copy())], op="diag_embed"
    )


def logsumexp(x, axis: int):
    """Stable log-sum-exp along one axis; the max shift carries no gradient."""
    shift = np.max(value_of(x), axis=axis, keepdims=True)
    shifted = sub(x, shift)
    summed = reduce_sum(exp(shifted), axis=axis)
    return add(log(summed), np.squeeze(shift, axis=axis))


def backward(tape: Tape, seed: Node) -> dict[Node, Array]:
    """Reverse-mode sweep from a scalar seed.

    Returns adjoint arrays for every node that still holds one at the end of
    the sweep, which includes all reachable leaves. Unreachable leaves simply
    do not appear (their gradient is zero).
    """
    if not isinstance(seed, Node) or seed.value.size != 1:
        raise NonScalarSeed("backward seed must be a scalar node")
    grads: dict[Node, Array] = {seed: np.ones_like(seed.value)}
    results: dict[Node, Array] = {}
    for node in reversed(tape.nodes[: seed.index + 1]):
        g = grads.pop(node, None)
        if g is None:
            continue
        if not node.parents:
            results[node] = g
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            acc = grads.get(parent)
            grads[parent] = contrib if acc is None else acc + contrib
    return results
