"""Dense-matrix computation graph with reverse-mode differentiation.

Every node value is a 2-D float64 matrix; vectors are carried as 1xN rows
or Kx1 columns. Graphs are built eagerly by the op functions below and
differentiated by a single reverse sweep in construction order, which is
topological by construction and therefore deterministic run to run.

Construction and backward are single-threaded per graph. Distinct graphs
over a shared read-only ParamStore may run in separate processes.
"""

from __future__ import annotations

import itertools
import json
import os
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Node",
    "ParamStore",
    "DiffError",
    "ShapeError",
    "DomainError",
    "ContractError",
    "constant",
    "parameter",
    "no_grad",
    "grad_enabled",
    "affine",
    "activation",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "log",
    "l2norm",
    "mean",
    "sum_all",
    "mean_rows",
    "transpose",
    "concat_cols",
    "slice_cols",
    "tile_rows",
    "scale_rows",
    "reshape",
    "row_l2",
    "backward",
    "finite_diff_check",
    "write_checkpoint",
    "read_checkpoint",
]


class DiffError(Exception):
    """Base error for graph construction and execution."""


class ShapeError(DiffError):
    """Operand shapes are incompatible."""


class DomainError(DiffError):
    """Operand values are outside an op's domain."""


class ContractError(DiffError):
    """An op precondition was violated."""


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One value in the computation graph.

    `value` is a 2-D float64 array. `grad` has the same shape and reads as
    zero until a backward pass deposits into it.
    """

    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "_id")

    def __init__(self, value, requires_grad: bool = False):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"node values must be 2-D matrices, got shape {v.shape}")
        self.value = v
        self._grad = None
        self.parents = ()
        self._backward = None
        self.requires_grad = requires_grad and _grad_enabled
        self._id = next(_ids)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def parameter(value) -> Node:
    return Node(value, requires_grad=True)


def _accumulate(node: Node, g: np.ndarray):
    if node._grad is None:
        node._grad = g.copy()
    else:
        node._grad += g


def _make(value: np.ndarray, parents, backward_fn) -> Node:
    out = Node(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# core ops


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b, with b a 1xN row broadcast over the rows of x."""
    if x.value.shape[1] != w.value.shape[0]:
        raise ShapeError(
            f"affine: inner dimensions disagree, x has shape {x.value.shape} "
            f"and w has shape {w.value.shape}"
        )
    if b.value.shape != (1, w.value.shape[1]):
        raise ShapeError(
            f"affine: bias shape {b.value.shape} does not match output "
            f"width {(1, w.value.shape[1])}"
        )
    out_val = x.value @ w.value + b.value

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ w.value.T)
        if w.requires_grad:
            _accumulate(w, x.value.T @ g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0, keepdims=True))

    return _make(out_val, (x, w, b), bw)


def matmul(x: Node, y: Node) -> Node:
    if x.value.shape[1] != y.value.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {x.value.shape} vs {y.value.shape}"
        )
    out_val = x.value @ y.value

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ y.value.T)
        if y.requires_grad:
            _accumulate(y, x.value.T @ g)

    return _make(out_val, (x, y), bw)


def _binary_shapes(a: np.ndarray, b: np.ndarray, opname: str):
    # permitted: identical shapes, or one operand a 1x1 scalar, or a 1xN row
    # against a KxN matrix, or a Kx1 column against a KxN matrix
    if a.shape == b.shape:
        return
    for s, t in ((a.shape, b.shape), (b.shape, a.shape)):
        if s == (1, 1):
            return
        if s[0] == 1 and s[1] == t[1]:
            return
        if s[1] == 1 and s[0] == t[0]:
            return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def add(x: Node, y: Node) -> Node:
    _binary_shapes(x.value, y.value, "add")
    out_val = x.value + y.value

    def bw(g):
        if x.requires_grad:
            _accumulate(x, _reduce_to(g, x.value.shape))
        if y.requires_grad:
            _accumulate(y, _reduce_to(g, y.value.shape))

    return _make(out_val, (x, y), bw)


def sub(x: Node, y: Node) -> Node:
    _binary_shapes(x.value, y.value, "sub")
    out_val = x.value - y.value

    def bw(g):
        if x.requires_grad:
            _accumulate(x, _reduce_to(g, x.value.shape))
        if y.requires_grad:
            _accumulate(y, _reduce_to(-g, y.value.shape))

    return _make(out_val, (x, y), bw)


def mul(x: Node, y: Node) -> Node:
    _binary_shapes(x.value, y.value, "mul")
    out_val = x.value * y.value

    def bw(g):
        if x.requires_grad:
            _accumulate(x, _reduce_to(g * y.value, x.value.shape))
        if y.requires_grad:
            _accumulate(y, _reduce_to(g * x.value, y.value.shape))

    return _make(out_val, (x, y), bw)


def div(x: Node, y: Node) -> Node:
    _binary_shapes(x.value, y.value, "div")
    out_val = x.value / y.value

    def bw(g):
        if x.requires_grad:
            _accumulate(x, _reduce_to(g / y.value, x.value.shape))
        if y.requires_grad:
            _accumulate(y, _reduce_to(-g * out_val / y.value, y.value.shape))

    return _make(out_val, (x, y), bw)


def neg(x: Node) -> Node:
    def bw(g):
        _accumulate(x, -g)

    return _make(-x.value, (x,), bw)


def scale(x: Node, k: float) -> Node:
    k = float(k)

    def bw(g):
        _accumulate(x, g * k)

    return _make(x.value * k, (x,), bw)


# ---------------------------------------------------------------------------
# activations and reductions


def tanh(x: Node) -> Node:
    out_val = np.tanh(x.value)

    def bw(g):
        _accumulate(x, g * (1.0 - out_val * out_val))

    return _make(out_val, (x,), bw)


def sigmoid(x: Node) -> Node:
    out_val = 1.0 / (1.0 + np.exp(-x.value))

    def bw(g):
        _accumulate(x, g * out_val * (1.0 - out_val))

    return _make(out_val, (x,), bw)


def relu(x: Node) -> Node:
    # subgradient at 0 is 0
    mask = x.value > 0.0
    out_val = np.where(mask, x.value, 0.0)

    def bw(g):
        _accumulate(x, g * mask)

    return _make(out_val, (x,), bw)


def softmax(x: Node) -> Node:
    """Row-wise softmax along the last dimension."""
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_val = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out_val).sum(axis=1, keepdims=True)
        _accumulate(x, out_val * (g - dot))

    return _make(out_val, (x,), bw)


def log(x: Node) -> Node:
    if np.any(x.value <= 0.0):
        raise DomainError(f"log: non-positive input (min {x.value.min():g})")
    out_val = np.log(x.value)

    def bw(g):
        _accumulate(x, g / x.value)

    return _make(out_val, (x,), bw)


def l2norm(x: Node) -> Node:
    """Euclidean norm of all entries, as a 1x1 scalar."""
    n = float(np.sqrt((x.value * x.value).sum()))
    out_val = np.array([[n]])

    def bw(g):
        denom = n if n > 0.0 else 1e-300
        _accumulate(x, (g[0, 0] / denom) * x.value)

    return _make(out_val, (x,), bw)


def mean(x: Node) -> Node:
    """Mean of all entries, as a 1x1 scalar."""
    out_val = np.array([[x.value.mean()]])
    inv = 1.0 / x.value.size

    def bw(g):
        _accumulate(x, np.full_like(x.value, g[0, 0] * inv))

    return _make(out_val, (x,), bw)


def sum_all(x: Node) -> Node:
    out_val = np.array([[x.value.sum()]])

    def bw(g):
        _accumulate(x, np.full_like(x.value, g[0, 0]))

    return _make(out_val, (x,), bw)


def mean_rows(x: Node) -> Node:
    """Mean over rows: KxM -> 1xM."""
    out_val = x.value.mean(axis=0, keepdims=True)
    inv = 1.0 / x.value.shape[0]

    def bw(g):
        _accumulate(x, np.repeat(g * inv, x.value.shape[0], axis=0))

    return _make(out_val, (x,), bw)


_ACTIVATIONS = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax": softmax,
    "log": log,
    "l2norm": l2norm,
    "mean": mean,
}


def activation(x: Node, kind: str) -> Node:
    """Apply a named activation or reduction (see _ACTIVATIONS)."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation kind {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# structural ops


def transpose(x: Node) -> Node:
    def bw(g):
        _accumulate(x, g.T)

    return _make(x.value.T.copy(), (x,), bw)


def concat_cols(parts) -> Node:
    parts = list(parts)
    rows = parts[0].value.shape[0]
    for p in parts:
        if p.value.shape[0] != rows:
            raise ShapeError(
                "concat_cols: row counts differ: "
                + ", ".join(str(q.value.shape) for q in parts)
            )
    widths = [p.value.shape[1] for p in parts]
    out_val = np.concatenate([p.value for p in parts], axis=1)

    def bw(g):
        j = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accumulate(p, g[:, j : j + w])
            j += w

    return _make(out_val, parts, bw)


def slice_cols(x: Node, j0: int, j1: int) -> Node:
    if not (0 <= j0 < j1 <= x.value.shape[1]):
        raise ShapeError(f"slice_cols: [{j0}:{j1}] out of range for {x.value.shape}")

    def bw(g):
        full = np.zeros_like(x.value)
        full[:, j0:j1] = g
        _accumulate(x, full)

    return _make(x.value[:, j0:j1].copy(), (x,), bw)


def tile_rows(x: Node, k: int) -> Node:
    """Repeat a 1xM row k times into a KxM matrix."""
    if x.value.shape[0] != 1:
        raise ShapeError(f"tile_rows expects a single row, got {x.value.shape}")
    out_val = np.repeat(x.value, k, axis=0)

    def bw(g):
        _accumulate(x, g.sum(axis=0, keepdims=True))

    return _make(out_val, (x,), bw)


def scale_rows(x: Node, s: Node) -> Node:
    """Scale row k of x (KxM) by scalar s[k] (Kx1)."""
    if s.value.shape != (x.value.shape[0], 1):
        raise ShapeError(
            f"scale_rows: scaler shape {s.value.shape} does not match rows of {x.value.shape}"
        )
    out_val = x.value * s.value

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g * s.value)
        if s.requires_grad:
            _accumulate(s, (g * x.value).sum(axis=1, keepdims=True))

    return _make(out_val, (x, s), bw)


def reshape(x: Node, rows: int, cols: int) -> Node:
    if rows * cols != x.value.size:
        raise ShapeError(f"reshape: cannot view {x.value.shape} as {(rows, cols)}")
    out_val = x.value.reshape(rows, cols).copy()

    def bw(g):
        _accumulate(x, g.reshape(x.value.shape))

    return _make(out_val, (x,), bw)


def row_l2(x: Node) -> Node:
    """Euclidean norm of each row: KxM -> Kx1."""
    norms = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True))
    out_val = norms

    def bw(g):
        safe = np.where(norms > 0.0, norms, 1e-300)
        _accumulate(x, (g / safe) * x.value)

    return _make(out_val, (x,), bw)


# ---------------------------------------------------------------------------
# backward


def backward(root: Node) -> None:
    """Populate grads of all ancestors of a scalar root.

    Nodes are visited in reverse construction order, which is a reverse
    topological order of the graph, so shared subexpressions accumulate
    deterministically.
    """
    if root.value.shape != (1, 1):
        raise ContractError(f"backward root must be a 1x1 scalar, got {root.value.shape}")
    if not root.requires_grad:
        return
    # collect the subgraph below root
    seen = {id(root)}
    order = [root]
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                order.append(p)
                stack.append(p)
    order.sort(key=lambda n: n._id, reverse=True)
    _accumulate(root, np.ones((1, 1)))
    for node in order:
        if node._backward is not None:
            node._backward(node._grad)


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Named parameter matrices with stable, deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        node = parameter(np.asarray(value, dtype=np.float64))
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def nodes(self):
        return list(self._params.values())

    def total_count(self) -> int:
        return sum(n.value.size for n in self._params.values())

    def zero_grad(self):
        for n in self._params.values():
            n._grad = None

    def flat_values(self) -> np.ndarray:
        return np.concatenate([n.value.ravel() for n in self._params.values()])

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([n.grad.ravel() for n in self._params.values()])

    def set_flat_values(self, flat: np.ndarray):
        i = 0
        for n in self._params.values():
            size = n.value.size
            n.value = flat[i : i + size].reshape(n.value.shape).astype(np.float64)
            i += size
        if i != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, store holds {i}")

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, node in self._params.items():
            out.add(name, node.value.copy())
        return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, store: ParamStore, h: float = 1e-4) -> float:
    """Compare backward gradients of f against central differences.

    f maps the store to a scalar Node. Returns the max relative error over
    every parameter coordinate, with denominator max(|analytic|, |numeric|,
    1e-8).
    """
    if h <= 0:
        raise ContractError("finite_diff_check requires h > 0")
    store.zero_grad()
    root = f(store)
    if not np.isfinite(root.value[0, 0]):
        raise DomainError("finite_diff_check: f evaluated non-finite")
    backward(root)
    analytic = {name: node.grad.copy() for name, node in store.items()}

    worst = 0.0
    for name, node in store.items():
        flat = node.value.ravel()
        a_flat = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_plus = float(f(store).value[0, 0])
            flat[i] = orig - h
            with no_grad():
                f_minus = float(f(store).value[0, 0])
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise DomainError(f"finite_diff_check: non-finite f near {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            err = abs(a_flat[i] - numeric) / denom
            if err > worst:
                worst = err
    store.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: JSON mapping parameter names to shape + flat values;
# floats are serialized with shortest round-trip repr, lossless at 17
# significant digits.


def write_checkpoint(path, store: ParamStore, header: dict | None = None):
    doc = {
        "header": header or {},
        "params": [
            {
                "name": name,
                "shape": list(node.value.shape),
                "values": node.value.ravel().tolist(),
            }
            for name, node in store.items()
        ],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def read_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    store = ParamStore()
    for entry in doc["params"]:
        shape = tuple(entry["shape"])
        values = np.array(entry["values"], dtype=np.float64).reshape(shape)
        store.add(entry["name"], values)
    return store, doc.get("header", {})
