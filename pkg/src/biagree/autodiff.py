"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every value is a dense ``np.ndarray`` of dtype float64.  Graphs are rebuilt
for each minibatch; ``backward`` walks the graph in reverse topological order
and accumulates adjoints additively, so a node consumed twice receives the sum
of both contributions.

Broadcasting is deliberately absent: apart from ``scale`` (multiplication by a
Python scalar) every binary primitive requires equal shapes.  Row-wise bias
addition is expressed as an embedding lookup of a ``(1, n)`` table.
"""
from __future__ import annotations

import itertools
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Node",
    "ParamStore",
    "PRIMITIVES",
    "apply_primitive",
    "constant",
    "add",
    "multiply",
    "matmul",
    "concat",
    "embed",
    "tanh",
    "sigmoid",
    "softmax",
    "log",
    "pick",
    "sum_",
    "scale",
    "reshape",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_ids = itertools.count()


class Node:
    __slots__ = ("id", "op", "inputs", "value", "adjoint", "attrs", "name")

    def __init__(self, op, inputs, value, attrs=None, name=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.adjoint = None
        self.attrs = attrs or {}
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class ParamStore:
    """Named float64 parameter arrays with fixed shapes."""

    def __init__(self, arrays=None):
        self._arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name, arr):
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.array(arr, dtype=np.float64, copy=True)

    def __getitem__(self, name):
        return self._arrays[name]

    def __setitem__(self, name, arr):
        arr = np.asarray(arr, dtype=np.float64)
        old = self._arrays[name]
        if arr.shape != old.shape:
            raise ShapeError(f"parameter {name!r} has shape {old.shape}, got {arr.shape}")
        self._arrays[name] = arr.copy()

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self):
        return list(self._arrays)

    @property
    def size(self):
        return int(sum(a.size for a in self._arrays.values()))

    def copy(self):
        return ParamStore(self._arrays)

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self._arrays.items()}

    def node(self, name):
        """Fresh graph leaf bound to parameter ``name``."""
        return Node("param", (), self._arrays[name], name=name)

    def nodes(self):
        return {k: self.node(k) for k in self._arrays}

    def equal(self, other):
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self._arrays
        )


def _check_finite(kind, value):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind}: non-finite value produced")


# --- forward / backward rules -------------------------------------------------
# Each backward rule receives (node, upstream adjoint) and returns one adjoint
# per input (None for inputs that carry no gradient, e.g. integer indices).


def _same_shape(kind, nodes):
    shapes = [n.shape for n in nodes]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"{kind}: shape mismatch {shapes}")


def _f_add(inputs, attrs):
    _same_shape("add", inputs)
    out = inputs[0].value
    for n in inputs[1:]:
        out = out + n.value
    return out


def _b_add(node, g):
    return [g] * len(node.inputs)


def _f_multiply(inputs, attrs):
    _same_shape("multiply", inputs)
    a, b = inputs
    return a.value * b.value


def _b_multiply(node, g):
    a, b = node.inputs
    return [g * b.value, g * a.value]


def _f_matmul(inputs, attrs):
    a, b = inputs
    sa, sb = a.shape, b.shape
    ok = (
        len(sa) >= 2
        and len(sb) >= 2
        and sa[-1] == sb[-2]
        and (len(sb) == 2 or (len(sa) == len(sb) == 3 and sa[0] == sb[0]))
    )
    if not ok:
        raise ShapeError(f"matrix-multiply: incompatible shapes {sa} x {sb}")
    return a.value @ b.value


def _b_matmul(node, g):
    a, b = node.inputs
    av, bv = a.value, b.value
    da = g @ np.swapaxes(bv, -1, -2)
    if bv.ndim == 2:
        k = av.shape[-1]
        db = av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
    else:
        db = np.swapaxes(av, -1, -2) @ g
    return [da, db]


def _f_concat(inputs, attrs):
    axis = attrs["axis"]
    ref = inputs[0].shape
    for n in inputs[1:]:
        s = n.shape
        if len(s) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(s, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concatenate: incompatible shapes {[n.shape for n in inputs]} on axis {axis}")
    return np.concatenate([n.value for n in inputs], axis=axis)


def _b_concat(node, g):
    axis = node.attrs["axis"]
    sizes = [n.shape[axis] for n in node.inputs]
    cuts = np.cumsum(sizes)[:-1]
    return np.split(g, cuts, axis=axis)


def _f_embed(inputs, attrs):
    (table,) = inputs
    idx = attrs["indices"]
    if table.value.ndim != 2:
        raise ShapeError(f"embedding-lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding-lookup: index out of range for table {table.shape}")
    return table.value[idx]


def _b_embed(node, g):
    (table,) = node.inputs
    out = np.zeros_like(table.value)
    np.add.at(out, node.attrs["indices"], g)
    return [out]


def _f_tanh(inputs, attrs):
    return np.tanh(inputs[0].value)


def _b_tanh(node, g):
    return [g * (1.0 - node.value * node.value)]


def _f_sigmoid(inputs, attrs):
    x = inputs[0].value
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _b_sigmoid(node, g):
    y = node.value
    return [g * y * (1.0 - y)]


def _f_softmax(inputs, attrs):
    x = inputs[0].value
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _b_softmax(node, g):
    y = node.value
    # Jacobian is invariant to a per-row shift of g; shifting by the first
    # entry makes constant rows give exactly zero.
    g = g - g[..., :1]
    return [y * (g - (g * y).sum(axis=-1, keepdims=True))]


def _f_log(inputs, attrs):
    x = inputs[0].value
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input")
    return np.log(x)


def _b_log(node, g):
    return [g / node.inputs[0].value]


def _f_pick(inputs, attrs):
    (x,) = inputs
    idx = attrs["indices"]
    if x.value.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick-index: need (B, V) input and (B,) indices, got {x.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError(f"pick-index: index out of range for {x.shape}")
    return x.value[np.arange(x.shape[0]), idx]


def _b_pick(node, g):
    (x,) = node.inputs
    out = np.zeros_like(x.value)
    out[np.arange(x.shape[0]), node.attrs["indices"]] = g
    return [out]


def _f_sum(inputs, attrs):
    axis = attrs.get("axis")
    return np.asarray(inputs[0].value.sum(axis=axis, keepdims=attrs.get("keepdims", False)), dtype=np.float64)


def _b_sum(node, g):
    x = node.inputs[0]
    axis = node.attrs.get("axis")
    if axis is not None and not node.attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


def _f_scale(inputs, attrs):
    return inputs[0].value * attrs["c"]


def _b_scale(node, g):
    return [g * node.attrs["c"]]


def _f_reshape(inputs, attrs):
    x = inputs[0]
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.value.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return x.value.reshape(shape)


def _b_reshape(node, g):
    return [g.reshape(node.inputs[0].shape)]


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_f_add, _b_add),
    "multiply": (_f_multiply, _b_multiply),
    "matrix-multiply": (_f_matmul, _b_matmul),
    "concatenate": (_f_concat, _b_concat),
    "embedding-lookup": (_f_embed, _b_embed),
    "tanh": (_f_tanh, _b_tanh),
    "sigmoid": (_f_sigmoid, _b_sigmoid),
    "softmax-over-last-axis": (_f_softmax, _b_softmax),
    "log": (_f_log, _b_log),
    "pick-index": (_f_pick, _b_pick),
    "sum": (_f_sum, _b_sum),
    "scalar-scale": (_f_scale, _b_scale),
    "reshape": (_f_reshape, _b_reshape),
}


def apply_primitive(kind: str, inputs: Sequence[Node], **attrs) -> Node:
    try:
        forward, _ = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if kind in ("embedding-lookup", "pick-index"):
        attrs["indices"] = np.array(attrs["indices"], dtype=np.intp)
    value = forward(inputs, attrs)
    _check_finite(kind, value)
    return Node(kind, inputs, value, attrs)


def constant(value) -> Node:
    value = np.asarray(value, dtype=np.float64)
    _check_finite("constant", value)
    return Node("const", (), value)


# thin wrappers; these are what model code calls


def add(*nodes):
    return apply_primitive("add", nodes)


def multiply(a, b):
    return apply_primitive("multiply", (a, b))


def matmul(a, b):
    return apply_primitive("matrix-multiply", (a, b))


def concat(nodes, axis=-1):
    return apply_primitive("concatenate", tuple(nodes), axis=axis)


def embed(table, indices):
    return apply_primitive("embedding-lookup", (table,), indices=indices)


def tanh(x):
    return apply_primitive("tanh", (x,))


def sigmoid(x):
    return apply_primitive("sigmoid", (x,))


def softmax(x):
    return apply_primitive("softmax-over-last-axis", (x,))


def log(x):
    return apply_primitive("log", (x,))


def pick(x, indices):
    return apply_primitive("pick-index", (x,), indices=indices)


def sum_(x, axis=None, keepdims=False):
    return apply_primitive("sum", (x,), axis=axis, keepdims=keepdims)


def scale(x, c):
    return apply_primitive("scalar-scale", (x,), c=float(c))


def reshape(x, shape):
    return apply_primitive("reshape", (x,), shape=tuple(shape))


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for inp in node.inputs:
            if inp.id not in seen:
                stack.append((inp, False))
    return order


def backward(root: Node, params: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Gradient of scalar ``root`` with respect to every parameter leaf.

    Parameters of ``params`` that the graph does not reach get zero arrays.
    Multiple leaves bound to the same name are summed.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    for n in order:
        n.adjoint = None
    root.adjoint = np.ones_like(root.value)
    grads: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = node.adjoint
        if g is None:
            continue
        if node.op == "param":
            if node.name in grads:
                grads[node.name] = grads[node.name] + g
            else:
                grads[node.name] = np.array(g, dtype=np.float64)
            continue
        if not node.inputs:
            continue
        contribs = PRIMITIVES[node.op][1](node, g)
        for inp, c in zip(node.inputs, contribs):
            if c is None or inp.op == "const":
                continue
            inp.adjoint = c if inp.adjoint is None else inp.adjoint + c
    if params is not None:
        for name, arr in params.items():
            if name not in grads:
                grads[name] = np.zeros_like(arr)
    return grads


def finite_diff_check(fn: Callable[[ParamStore], Node], params: ParamStore, step: float = 1e-5,
                      names: Iterable[str] | None = None) -> float:
    """Max relative error between ``backward`` and central differences.

    ``fn`` maps a ParamStore to a scalar Node.  The error per entry is
    ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    root = fn(params)
    analytic = backward(root, params)
    worst = 0.0
    for name in names if names is not None else params.names():
        base = params[name]
        flat = base.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            vals = []
            for sgn in (1.0, -1.0):
                pert = flat.copy()
                pert[i] += sgn * step
                params[name] = pert.reshape(base.shape)
                v = float(fn(params).value)
                if not np.isfinite(v):
                    raise NonFiniteError(f"finite_diff_check: non-finite value at {name}[{i}]")
                vals.append(v)
            num[i] = (vals[0] - vals[1]) / (2.0 * step)
        params[name] = base
        a = analytic[name].reshape(-1)
        err = np.abs(a - num) / (np.abs(a) + np.abs(num) + 1e-12)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
