"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Values are plain ``numpy.ndarray`` buffers (row-major, float64).  A
:class:`Node` wraps one value together with the edges needed to push
gradients back to its parents.  Graphs are rebuilt on every forward pass.

Example::

    x = Node(np.array([0.0]), name="x")
    y = sigmoid(x).sum()
    grads = backward(y)          # {"x": array([0.25])}
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(op: str, value: np.ndarray) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value in a computation graph.

    Leaves created directly by the user are differentiable when
    ``requires_grad`` is true; their ``grad`` accumulator starts at zero and
    is only ever mutated by :func:`backward`.
    """

    __slots__ = ("value", "parents", "op", "grad", "requires_grad", "name", "_rule")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        rule: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = True,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents = tuple(parents)
        self.op = op
        self._rule = rule
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad = np.zeros_like(self.value) if not self.parents else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Node":
        return const(self.value)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, const(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def const(value) -> Node:
    """A non-differentiable leaf."""
    return Node(value, requires_grad=False)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(op: str, value: np.ndarray, parents: Sequence[Node], rule) -> Node:
    _check_finite(op, value)
    return Node(value, parents, op=op, rule=rule, requires_grad=False)


# ---------------------------------------------------------------------------
# ops


def _broadcast_shape(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Node, b: Node) -> Node:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a: Node, b: Node) -> Node:
    """Batched matrix product over the last two axes (numpy semantics)."""
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {av.shape} and {bv.shape}")
    try:
        out = av @ bv
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply shapes {av.shape} and {bv.shape}") from None

    def rule(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make("matmul", out, (a, b), rule)


def transpose(a: Node) -> Node:
    """Swap the last two axes."""
    if a.value.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got shape {a.shape}")
    return _make("transpose", np.swapaxes(a.value, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def sigmoid(a: Node) -> Node:
    # two-branch form avoids exp overflow for large |x|
    x = a.value
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Node) -> Node:
    """log(sigmoid(x)) without the underflow of composing the two."""
    x = a.value
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    # d/dx log sigmoid(x) = 1 - sigmoid(x) = sigmoid(-x)
    e = np.exp(-np.abs(x))
    s_neg = np.where(x >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return _make("log_sigmoid", out, (a,), lambda g: (g * s_neg,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make("relu", a.value * mask, (a,), lambda g: (g * mask,))


def log(a: Node) -> Node:
    if (a.value <= 0).any():
        raise NonFiniteError("log: input must be strictly positive")
    av = a.value
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def clamp(a: Node, lo: float, hi: float) -> Node:
    """Clip values; gradient passes only where the input was inside [lo, hi]."""
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make("clamp", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a: Node) -> Node:
    """Softmax over the last axis."""
    x = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), rule)


def gather(table: Node, index) -> Node:
    """Row gather ``table[index]``; ``index`` is an integer array of any shape."""
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"gather: index must be integer, got {idx.dtype}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range [0, {n}) (min={idx.min()}, max={idx.max()})")
    tshape = table.shape

    def rule(g):
        out = np.zeros(tshape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _make("gather", table.value[idx], (table,), rule)


def take(a: Node, i: int, axis: int) -> Node:
    """Select one slice along ``axis`` (drops that axis)."""
    av = a.value
    ax = axis % av.ndim
    if not -av.shape[ax] <= i < av.shape[ax]:
        raise IndexError(f"take: index {i} out of range for axis {axis} of shape {av.shape}")

    def rule(g):
        out = np.zeros_like(av)
        sl = [slice(None)] * av.ndim
        sl[ax] = i
        out[tuple(sl)] = g
        return (out,)

    return _make("take", np.take(av, i, axis=ax), (a,), rule)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    vals = [n.value for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]} along axis {axis}") from None
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make("concat", out, tuple(nodes), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    vals = [n.value for n in nodes]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[v.shape for v in vals]}") from None
    k = len(nodes)
    return _make("stack", out, tuple(nodes),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(k)))


def reshape(a: Node, shape) -> Node:
    av = a.value
    try:
        out = av.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {av.shape} to {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(av.shape),))


def sum_(a: Node, axis=None) -> Node:
    av = a.value

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make("sum", np.asarray(av.sum(axis=axis)), (a,), rule)


def mean(a: Node, axis=None) -> Node:
    av = a.value
    count = av.size if axis is None else av.shape[axis]

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, av.shape).copy(),)

    return _make("mean", np.asarray(av.mean(axis=axis)), (a,), rule)


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
    "gather": gather,
    "concat": concat,
    "mean": mean,
    "log": log,
}


def forward_op(op_kind: str, inputs: Sequence[Node], **kwargs) -> Node:
    """Dispatch by name; mostly for table-driven tests."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(OPS)}") from None
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    if op_kind == "gather":
        return fn(inputs[0], **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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


def backward(root: Node) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every differentiable leaf's ``grad``.

    Accumulators are never reset here; calling twice on the same graph adds
    the gradient twice.  Returns the accumulators of the named leaves that
    the root depends on.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[str, Node] = {}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad += g
            if node.name is not None:
                leaves[node.name] = node
            continue
        for parent, pg in zip(node.parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return {name: leaf.grad for name, leaf in leaves.items()}


# ---------------------------------------------------------------------------
# parameter sets


class ParamSet(OrderedDict):
    """Named float64 arrays kept in lexicographic name order."""

    def __init__(self, items: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        super().__init__()
        pairs = items.items() if isinstance(items, Mapping) else items
        for name, arr in sorted(pairs, key=lambda kv: kv[0]):
            super().__setitem__(name, np.asarray(arr, dtype=DTYPE))

    def __setitem__(self, name, value):
        super().__setitem__(name, np.asarray(value, dtype=DTYPE))
        if list(self.keys()) != sorted(self.keys()):
            ordered = sorted(self.items(), key=lambda kv: kv[0])
            self.clear()
            for k, v in ordered:
                OrderedDict.__setitem__(self, k, v)

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self.items())

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values())

    def flatten(self) -> np.ndarray:
        if not self:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([v.ravel() for v in self.values()])

    def unflatten(self, vector: np.ndarray) -> "ParamSet":
        """A new ParamSet with this set's names/shapes and ``vector``'s values."""
        vector = np.asarray(vector, dtype=DTYPE)
        if vector.shape != (self.size,):
            raise ShapeError(f"unflatten: expected vector of length {self.size}, got {vector.shape}")
        out, pos = [], 0
        for k, v in self.items():
            out.append((k, vector[pos:pos + v.size].reshape(v.shape).copy()))
            pos += v.size
        return ParamSet(out)

    def nodes(self, trainable: bool = True) -> dict[str, Node]:
        """Fresh graph leaves for every parameter (constants if not trainable)."""
        if trainable:
            return {k: Node(v, name=k) for k, v in self.items()}
        return {k: const(v) for k, v in self.items()}

    def check_compatible(self, other: "ParamSet", what: str = "params") -> None:
        if list(self.keys()) != list(other.keys()):
            raise ShapeError(f"{what}: name sets differ: {sorted(set(self) ^ set(other))}")
        for k in self:
            if self[k].shape != other[k].shape:
                raise ShapeError(f"{what}: shape mismatch for {k!r}: {self[k].shape} vs {other[k].shape}")


def grads_of(leaves: Mapping[str, Node]) -> ParamSet:
    return ParamSet((k, n.grad.copy()) for k, n in leaves.items())


# ---------------------------------------------------------------------------
# checkpoint format: "LTAP" | u32 version | u32 count | per tensor:
#   u32 name_len | name utf-8 | u32 rank | u64 dims... | f64 LE values

MAGIC = b"LTAP"
VERSION = 1


def save_params(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    items = sorted(params.items(), key=lambda kv: kv[0])
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_params(path: str | Path) -> ParamSet:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(DTYPE)
        pos += 8 * n
        out.append((name, arr))
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return ParamSet(out)


# ---------------------------------------------------------------------------
# finite-difference check


def gradcheck(
    f: Callable[[Mapping[str, Node]], Node],
    params: ParamSet,
    step: float = 1e-5,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a dict of parameter leaves to a scalar node and must be
    deterministic.
    """
    if step <= 0:
        raise ValueError("gradcheck: step must be positive")
    leaves = params.nodes()
    root = f(leaves)
    backward(root)
    analytic = ParamSet((k, leaves[k].grad.copy()) for k in params).flatten()

    base = params.flatten()

    def evaluate(vec: np.ndarray) -> float:
        out = f(params.unflatten(vec).nodes(trainable=False)).value
        val = float(out)
        if not np.isfinite(val):
            raise NonFiniteError("gradcheck: function evaluated to a non-finite value")
        return val

    numeric = np.empty_like(base)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += step
        minus[i] -= step
        numeric[i] = (evaluate(plus) - evaluate(minus)) / (2 * step)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
