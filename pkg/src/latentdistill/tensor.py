"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is recorded dynamically: every primitive returns a new ``Tensor``
that remembers its parents and a vector-Jacobian closure.  ``backward`` walks
the graph in reverse topological order.  ``checkpointed_apply`` wraps a pure
function so its inner activations are dropped after the forward pass and
rebuilt on demand during backward.

Broadcasting is limited to adding a 1-D bias to the rows of a 2-D tensor.
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ContractError(ValueError):
    """A precondition of a tensor operation was violated."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during differentiation."""


_local = threading.local()


def _mode():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.collectors = []
        _local.backprops = []
    return _local


def is_grad_enabled() -> bool:
    return _mode().grad_enabled


@contextlib.contextmanager
def no_grad():
    m = _mode()
    prev, m.grad_enabled = m.grad_enabled, False
    try:
        yield
    finally:
        m.grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    m = _mode()
    prev, m.grad_enabled = m.grad_enabled, True
    try:
        yield
    finally:
        m.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "op")

    def __init__(self, data, requires_grad: bool = False, *, parents=(), vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.vjp = vjp
        self.op = op

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    m = _mode()
    needs = [p for p in parents if p.requires_grad]
    if needs and m.grad_enabled:
        return Tensor(data, True, parents=parents, vjp=vjp, op=op)
    if needs and m.collectors:
        for col in m.collectors:
            for p in needs:
                col.setdefault(id(p), p)
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shapes {a.shape} and {b.shape} do not align")
    A, B = a.data, b.data
    return _record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return _record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add")
    raise ContractError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _record(np.logaddexp(0.0, x), (a,), lambda g: (g * sig,), "softplus")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,), "log")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(a.data.sum(axis=axis), (a,), vjp, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def norm(a: Tensor) -> Tensor:
    """Euclidean norm over all entries; the gradient at zero is taken as zero."""
    x = a.data
    r = float(np.sqrt(np.sum(x * x)))

    def vjp(g):
        if r == 0.0:
            return (np.zeros_like(x),)
        return (g * x / r,)

    return _record(np.asarray(r), (a,), vjp, "norm")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _record(s, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "softmax")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp, "concat")


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate on backward."""
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), vjp, "slice")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _record(table.data[ids], (table,), vjp, "embedding")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ContractError("transpose expects a 2-D tensor")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T.copy(),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (-1,))


def mark(a: Tensor, label: str) -> Tensor:
    """Identity node carrying a label, used to count traversals in backward."""
    return _record(a.data, (a,), lambda g: (g,), label)


def reciprocal_positive(a: Tensor) -> Tensor:
    """1/a for strictly positive a, composed as exp(-log a)."""
    return exp(scale(log(a), -1.0))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


@dataclass
class BackwardStats:
    nodes: int = 0
    peak_saved: int = 0
    op_counts: Counter = field(default_factory=Counter)


last_backward_stats = BackwardStats()


def _topo(output: Tensor, stop: set[int]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in stop:
            continue
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(output: Tensor, seed: np.ndarray, stop: set[int]) -> tuple[dict[int, np.ndarray], BackwardStats]:
    m = _mode()
    order = _topo(output, stop)
    internal = [n for n in order if n.vjp is not None and id(n) not in stop]
    stats = BackwardStats(nodes=len(internal))
    live = len(internal)
    stats.peak_saved = live
    frame = {"child_peak": 0, "child_ops": Counter()}
    m.backprops.append(frame)
    grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=np.float64)}
    try:
        for node in reversed(order):
            if node.vjp is None or id(node) in stop:
                continue
            g = grads.pop(id(node), None)
            live -= 1
            stats.op_counts[node.op] += 1
            if g is None:
                continue
            parent_grads = node.vjp(g)
            if frame["child_peak"]:
                stats.peak_saved = max(stats.peak_saved, live + 1 + frame["child_peak"])
                stats.op_counts.update(frame["child_ops"])
                frame["child_peak"], frame["child_ops"] = 0, Counter()
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(f"non-finite gradient flowing out of node '{node.op}' into '{p.op}'")
                pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    finally:
        m.backprops.pop()
    if m.backprops:
        parent = m.backprops[-1]
        parent["child_peak"] = max(parent["child_peak"], stats.peak_saved)
        parent["child_ops"].update(stats.op_counts)
    return grads, stats


def backward(output: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor]):
    """Gradients of a scalar ``output`` with respect to ``wrt``.

    ``wrt`` may be a name -> Tensor mapping (a dict of arrays is returned) or a
    sequence (a list is returned).  Tensors the output does not depend on get
    zero gradients.  Statistics of the pass are left in ``last_backward_stats``.
    """
    global last_backward_stats
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    named = isinstance(wrt, Mapping)
    items = list(wrt.items()) if named else list(enumerate(wrt))
    if output.requires_grad:
        grads, stats = _backprop(output, np.ones(output.shape), set())
    else:
        grads, stats = {}, BackwardStats()
    last_backward_stats = stats
    out = {k: grads.get(id(t), np.zeros(t.shape)) for k, t in items}
    return out if named else [out[k] for k, _ in items]


def value_and_grad(f: Callable[..., Tensor], *args: Tensor):
    leaves = [Tensor(_as_tensor(a).data, requires_grad=True) for a in args]
    with enable_grad():
        out = f(*leaves)
    return out.item(), backward(out, leaves)


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(_as_tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def ev(arr):
        with no_grad():
            v = f(Tensor(arr))
        return v.item() if isinstance(v, Tensor) else float(v)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = ev(base.copy())
        flat[i] = orig - eps
        fm = ev(base.copy())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def _collect():
    m = _mode()
    found: dict[int, Tensor] = {}
    m.collectors.append(found)
    try:
        yield found
    finally:
        m.collectors.remove(found)


def checkpointed_apply(f: Callable[..., Tensor], *inputs: Tensor, debug: bool = False) -> Tensor:
    """Run ``f`` without keeping its inner graph; recompute it on backward.

    ``f`` must be pure.  Tensors requiring grad that ``f`` reaches through its
    closure (parameters being trained, say) still receive gradients.  With
    ``debug=True`` the recomputed output is compared bitwise to the original.
    """
    inputs = tuple(_as_tensor(x) for x in inputs)
    if not is_grad_enabled():
        return f(*inputs)
    with no_grad(), _collect() as found:
        out_data = f(*[Tensor(x.data) for x in inputs]).data
    input_ids = {id(x) for x in inputs}
    external = [t for k, t in found.items() if k not in input_ids]
    if not external and not any(x.requires_grad for x in inputs):
        return Tensor(out_data)

    def vjp(g):
        with enable_grad():
            leaves = [Tensor(x.data, requires_grad=x.requires_grad) for x in inputs]
            out = f(*leaves)
            if debug and not np.array_equal(out.data, out_data):
                raise ContractError("checkpointed function is not pure: recomputed output differs")
            stop = {id(t) for t in leaves} | {id(t) for t in external}
            if not out.requires_grad:
                return tuple(None for _ in leaves + external)
            grads, _ = _backprop(out, g, stop)
        return tuple(grads.get(id(t)) for t in leaves) + tuple(grads.get(id(t)) for t in external)

    parents = inputs + tuple(external)
    return _record(out_data, parents, vjp, "checkpoint")


def detach_all(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t.detach() for t in tensors]
