"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a tape: every differentiable primitive appends one node to the
active :class:`Graph`, so the node list is topologically ordered by
construction.  ``backward`` walks the tape in reverse from a scalar loss and
accumulates gradients additively into every ``requires_grad`` leaf it can
reach.  Two backward calls on the same tape are allowed (the trainer uses one
per loss term); callers zero gradients between optimization steps, not
between backward calls.

Values are immutable once wrapped in a Tensor, except that the optimizer
updates parameter ``.data`` in place between steps.  Tensors without a graph
node are safe to share read-only across threads; graph construction and
backward are single-threaded per run (the active tape is thread-local).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "reset_graph",
    "active_graph",
    "no_grad",
    "backward",
    "add",
    "mul",
    "matmul",
    "sigmoid",
    "relu",
    "log_softmax",
    "embedding_lookup",
    "max_over_rows",
    "tsum",
    "tmean",
    "exp",
    "log",
    "detach",
    "reshape",
    "transpose",
    "repeat_rows",
    "finite_difference_check",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's contract."""


class NonFiniteError(FloatingPointError):
    """A primitive received a NaN/inf input."""


class GraphError(RuntimeError):
    """Backward was invoked on a tensor with no graph linkage."""


_ids = itertools.count()
_state = threading.local()


def _tls():
    if not hasattr(_state, "graph"):
        _state.graph = None
        _state.grad_enabled = True
    return _state


class Graph:
    """Append-only tape of operation records, topologically ordered."""

    def __init__(self):
        self.nodes = []


class Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn", "graph")

    def __init__(self, kind, inputs, output, backward_fn, graph):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.graph = graph


def active_graph() -> Graph:
    tls = _tls()
    if tls.graph is None:
        tls.graph = Graph()
    return tls.graph


def reset_graph() -> Graph:
    """Discard the current tape and start a fresh one (call once per step)."""
    tls = _tls()
    tls.graph = Graph()
    return tls.graph


@contextmanager
def no_grad():
    """Evaluate without recording graph nodes (frozen-model inference)."""
    tls = _tls()
    prev = tls.grad_enabled
    tls.grad_enabled = False
    try:
        yield
    finally:
        tls.grad_enabled = prev


class Tensor:
    """Dense real-valued array with an optional gradient slot and tape link.

    ``reads`` counts how many times this tensor was consumed as a primitive
    input; tests use it to prove the question-only branch is never touched
    during inference.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "tid", "reads", "_finite")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"at most 3 dimensions supported, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.tid = next(_ids)
        self.reads = 0
        self._finite = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def ensure_finite(self, context: str):
        if self._finite is None:
            self._finite = bool(np.isfinite(self.data).all())
        if not self._finite:
            raise NonFiniteError(f"{context}: non-finite input tensor")

    def mark_dirty(self):
        """Invalidate the cached finiteness flag after in-place data updates."""
        self._finite = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def log_softmax(self):
        return log_softmax(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def detach(self):
        return detach(self)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _record(kind, inputs, out_data, backward_fn) -> Tensor:
    """Wrap a primitive result, appending a tape node unless every input is a
    detached constant or recording is disabled."""
    for t in inputs:
        t.reads += 1
        t.ensure_finite(kind)
    out = Tensor(out_data)
    tls = _tls()
    if tls.grad_enabled and any(_tracked(t) for t in inputs):
        out.requires_grad = True
        graph = active_graph()
        node = Node(kind, tuple(inputs), out, backward_fn, graph)
        out.node = node
        graph.nodes.append(node)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; the one permitted broadcast is a row-wise bias,
    i.e. (n, d) + (d,)."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match")
    out_data = a.data + b.data

    def backward_fn(g):
        gb = g.sum(axis=0) if bias else g
        return g, gb

    return _record("add", (a, b), out_data, backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match")
    out_data = a.data * b.data
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g * bd, g * ad

    return _record("mul", (a, b), out_data, backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out_data = a.data @ b.data
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), out_data, backward_fn)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # piecewise form avoids overflow in exp for large |x|
    xd = x.data
    out_data = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                        np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))

    def backward_fn(g):
        return (g * out_data * (1.0 - out_data),)

    return _record("sigmoid", (x,), out_data, backward_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0.0)
    mask_pos = x.data > 0

    def backward_fn(g):
        return (g * mask_pos,)

    return _record("relu", (x,), out_data, backward_fn)


def log_softmax(x) -> Tensor:
    """Log-softmax over the last axis, computed in the max-subtraction
    stable form (finite for inputs up to ~1e300)."""
    x = _as_tensor(x)
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out_data) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out_data, backward_fn)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` (vocab x d) at integer ``ids``."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError(f"embedding_lookup: ids must be a non-empty 1-d sequence, got shape {ids.shape}")
    vocab = table.shape[0]
    if ids.min() < 0 or ids.max() >= vocab:
        raise ShapeError(f"embedding_lookup: id out of range [0, {vocab}): {ids.min()}..{ids.max()}")
    out_data = table.data[ids]
    tshape = table.shape

    def backward_fn(g):
        gt = np.zeros(tshape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("embedding_lookup", (table,), out_data, backward_fn)


def max_over_rows(x) -> Tensor:
    """Max over the second-to-last axis (the region axis), saving argmax.

    (n, d) -> (d,) and (b, n, d) -> (b, d).  Ties resolve to the lowest row
    index, so backward routing is deterministic: gradient flows only to the
    winning row per coordinate.
    """
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"max_over_rows: needs at least 2 dimensions, got {x.shape}")
    idx = np.argmax(x.data, axis=-2)
    out_data = np.take_along_axis(x.data, idx[..., None, :], axis=-2).squeeze(-2)
    xshape = x.shape

    def backward_fn(g):
        gx = np.zeros(xshape)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _record("max_over_rows", (x,), out_data, backward_fn)


def tsum(x) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    out_data = x.data.sum()
    xshape = x.shape

    def backward_fn(g):
        return (np.full(xshape, float(g)),)

    return _record("sum", (x,), out_data, backward_fn)


def tmean(x) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    out_data = x.data.mean()
    xshape, n = x.shape, x.data.size

    def backward_fn(g):
        return (np.full(xshape, float(g) / n),)

    return _record("mean", (x,), out_data, backward_fn)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.max(initial=-np.inf) > 700.0:
        raise NonFiniteError("exp: input too large, result would overflow")
    out_data = np.exp(x.data)

    def backward_fn(g):
        return (g * out_data,)

    return _record("exp", (x,), out_data, backward_fn)


def log(x, floor: float = 1e-300) -> Tensor:
    """Natural log with a tiny positive floor; coordinates at or below the
    floor clamp to log(floor) and receive zero gradient."""
    x = _as_tensor(x)
    if x.data.min() < 0.0:
        raise NonFiniteError("log: negative input")
    clamped = np.maximum(x.data, floor)
    out_data = np.log(clamped)
    live = x.data > floor

    def backward_fn(g):
        return (g * live / clamped,)

    return _record("log", (x,), out_data, backward_fn)


def detach(x) -> Tensor:
    """Cut the tensor out of the graph: same values, no node, no gradient."""
    x = _as_tensor(x)
    x.reads += 1
    out = Tensor(x.data)
    out._finite = x._finite
    return out


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out_data = x.data.reshape(shape)
    xshape = x.shape

    def backward_fn(g):
        return (g.reshape(xshape),)

    return _record("reshape", (x,), out_data, backward_fn)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: needs a 2-d tensor, got {x.shape}")
    out_data = x.data.T

    def backward_fn(g):
        return (g.T,)

    return _record("transpose", (x,), out_data, backward_fn)


def repeat_rows(x, times: int) -> Tensor:
    """Repeat each row of a 2-d tensor ``times`` times consecutively."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"repeat_rows: needs a 2-d tensor, got {x.shape}")
    if times < 1:
        raise ShapeError(f"repeat_rows: times must be >= 1, got {times}")
    out_data = np.repeat(x.data, times, axis=0)
    n, d = x.shape

    def backward_fn(g):
        return (g.reshape(n, times, d).sum(axis=1),)

    return _record("repeat_rows", (x,), out_data, backward_fn)


# names the gradient checker enumerates, one entry per primitive
PRIMITIVES = (
    "add",
    "mul",
    "matmul",
    "sigmoid",
    "relu",
    "log_softmax",
    "embedding_lookup",
    "max_over_rows",
    "sum",
    "mean",
    "exp",
    "log",
    "detach",
    "reshape",
    "transpose",
    "repeat_rows",
)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Returns the full gradient map {tensor id -> gradient array} over every
    tensor the sweep reached, and accumulates (+=) into ``.grad`` of every
    ``requires_grad`` leaf.  Leaves behind a ``detach`` boundary receive
    exactly zero contribution through that boundary because the boundary has
    no graph linkage at all.
    """
    if loss.node is None:
        raise GraphError("backward called on a detached tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    # reachable set: nodes that contributed to the loss
    reachable = {id(loss.node)}
    stack = [loss.node]
    leaves = []
    while stack:
        node = stack.pop()
        for inp in node.inputs:
            if inp.node is not None:
                if id(inp.node) not in reachable:
                    reachable.add(id(inp.node))
                    stack.append(inp.node)
            elif inp.requires_grad:
                leaves.append(inp)

    grads = {loss.tid: np.ones_like(loss.data)}
    gmap = {}
    # the tape is topologically ordered by construction, so one reverse scan
    # visits each reachable node exactly once
    for node in reversed(loss.node.graph.nodes):
        if id(node) not in reachable:
            continue
        g = grads.pop(node.output.tid)
        gmap[node.output.tid] = g
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None:
                continue
            acc = grads.get(inp.tid)
            grads[inp.tid] = gi if acc is None else acc + gi

    gmap.update(grads)
    seen = set()
    for leaf in leaves:
        if leaf.tid in seen:
            continue
        seen.add(leaf.tid)
        g = grads.get(leaf.tid)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad += g
    return gmap


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_difference_check(f, point: Tensor, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of scalar-valued ``f`` at ``point``
    against central differences.

    Returns max over coordinates of
    ``|analytic - central| / max(|analytic|, |central|, 1e-8)``.
    """
    x = Tensor(point.data.copy(), requires_grad=True)
    x.zero_grad()
    saved = _tls().graph
    _tls().graph = Graph()
    try:
        out = f(x)
        if out.data.size != 1:
            raise ShapeError(f"finite_difference_check: f must be scalar-valued, got {out.shape}")
        if out.node is not None:
            backward(out)
        analytic = x.grad.copy()
    finally:
        _tls().graph = saved

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(x).item()
            flat[i] = orig - eps
            f_minus = f(x).item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("finite_difference_check: non-finite perturbed value")
            num_flat[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
