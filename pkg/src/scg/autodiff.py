"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Values are numpy arrays of rank 0, 1 or 2. Every primitive records a closure
that maps the output adjoint to operand adjoints; ``backward`` walks the graph
once in reverse topological order.

Gradients on parameter leaves *accumulate*: calling ``backward`` twice on the
same graph without ``ParamStore.zero_grad`` doubles them.
"""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

__all__ = [
    "Node", "Param", "ParamStore", "Adam", "GradientError",
    "const", "backward", "forward_backward", "op_set", "check_gradient",
    "add", "sub", "mul", "scale", "neg", "matmul", "linear", "dense_tanh",
    "concat", "slice_", "tanh", "sigmoid", "relu", "exp", "square", "sqrt",
    "softmax_ce", "sq_error", "sum_", "mean", "add_n", "dot", "custom",
    "affine_const", "save_checkpoint", "load_checkpoint", "dense_rows",
    "take_rows", "hcat", "col_slice", "softmax_ce_rows", "sq_error_rows",
]


class GradientError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "op", "needs_grad")

    def __init__(self, value, parents=(), vjp=None, op="const"):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.needs_grad = any(p.needs_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, item):
        if not isinstance(item, slice) or item.step not in (None, 1):
            raise TypeError("only contiguous slices are supported")
        return slice_(self, item.start or 0, item.stop if item.stop is not None else len(self.value))


class Param(Node):
    """Leaf holding a named trainable array."""

    __slots__ = ("name",)

    def __init__(self, name, value):
        super().__init__(value)
        self.name = name
        self.op = "param"
        self.needs_grad = True


def const(value):
    return Node(np.asarray(value, dtype=np.float64))


def _wrap(x):
    return x if isinstance(x, Node) else const(x)


# ---------------------------------------------------------------------------
# primitives

def add(a, b):
    return Node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    return Node(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, s):
    s = float(s)
    return Node(a.value * s, (a,), lambda g: (g * s,), "scale")


def neg(a):
    return Node(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    """Matrix-vector or matrix-matrix product."""
    av, bv = a.value, b.value

    def vjp(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return Node(av @ bv, (a, b), vjp, "matmul")


def linear(w, x, b):
    """``w @ x + b`` for a vector ``x``."""
    wv, xv = w.value, x.value

    def vjp(g):
        return (np.outer(g, xv) if w.needs_grad else None), wv.T @ g, g

    return Node(wv @ xv + b.value, (w, x, b), vjp, "linear")


def dense_tanh(w, x, b):
    """Fused ``tanh(w @ x + b)``; the workhorse of the tree networks."""
    wv, xv = w.value, x.value
    y = np.tanh(wv @ xv + b.value)

    def vjp(g):
        gp = g * (1.0 - y * y)
        return (np.outer(gp, xv) if w.needs_grad else None), wv.T @ gp, gp

    return Node(y, (w, x, b), vjp, "dense_tanh")


def concat(nodes):
    sizes = [n.value.shape[0] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts))

    return Node(np.concatenate([n.value for n in nodes]), tuple(nodes), vjp, "concat")


def slice_(a, start, stop):
    n = a.value.shape[0]

    def vjp(g):
        out = np.zeros(n)
        out[start:stop] = g
        return (out,)

    return Node(a.value[start:stop], (a,), vjp, "slice")


def tanh(a):
    y = np.tanh(a.value)
    return Node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a):
    pos = a.value > 0
    return Node(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,), "relu")


def exp(a):
    y = np.exp(a.value)
    return Node(y, (a,), lambda g: (g * y,), "exp")


def square(a):
    av = a.value
    return Node(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def sqrt(a):
    y = np.sqrt(a.value)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(y > 0, 0.5 * g / np.where(y > 0, y, 1.0), 0.0),)

    return Node(y, (a,), vjp, "sqrt")


def sum_(a):
    shape = a.value.shape
    return Node(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a):
    shape, n = a.value.shape, a.value.size
    return Node(np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def dot(a, b):
    av, bv = a.value, b.value
    return Node(np.asarray(av @ bv), (a, b), lambda g: (g * bv, g * av), "dot")


def add_n(nodes):
    """Sum of equally shaped nodes; zero scalar for an empty list."""
    nodes = tuple(nodes)
    if not nodes:
        return const(0.0)
    if len(nodes) == 1:
        return nodes[0]
    total = nodes[0].value.copy()
    for n in nodes[1:]:
        total = total + n.value
    return Node(total, nodes, lambda g: (g,) * len(nodes), "add_n")


def affine_const(a, mult, offset):
    """Elementwise ``a * mult + offset`` with constant arrays."""
    mult = np.asarray(mult, dtype=np.float64)
    return Node(a.value * mult + offset, (a,), lambda g: (g * mult,), "affine_const")


def softmax_ce(logits, target, weight=1.0):
    """Fused ``weight * -log softmax(logits)[target]``."""
    z = logits.value - logits.value.max()
    e = np.exp(z)
    s = e.sum()
    p = e / s
    loss = weight * (np.log(s) - z[target])

    def vjp(g):
        d = p.copy()
        d[target] -= 1.0
        return (float(g) * weight * d,)

    return Node(np.asarray(loss), (logits,), vjp, "softmax_ce")


def sq_error(a, target, mask=None):
    """``sum(mask * (a - target)**2)`` with ``target`` and ``mask`` constant."""
    diff = a.value - target
    if mask is not None:
        diff = diff * mask

    return Node(np.asarray(diff @ diff if diff.ndim == 1 else (diff * diff).sum()),
                (a,), lambda g: (2.0 * float(g) * diff,), "sq_error")


def custom(value, parents, vjp, op="custom"):
    """Wrap an externally computed value with a user supplied adjoint."""
    return Node(np.asarray(value, dtype=np.float64), tuple(parents), vjp, op)


# -- row-batched variants (rank-2 values, one row per item) -------------------

def dense_rows(x, w, b, act=None):
    """``act(x @ w.T + b)`` for a matrix ``x`` of row vectors; ``act`` is
    ``None`` or ``"tanh"``."""
    xv, wv = x.value, w.value
    y = xv @ wv.T + b.value
    if act == "tanh":
        y = np.tanh(y)

    def vjp(g):
        gp = g * (1.0 - y * y) if act == "tanh" else g
        gw = gp.T @ xv if w.needs_grad else None
        gb = gp.sum(axis=0) if b.needs_grad else None
        return gp @ wv, gw, gb

    return Node(y, (x, w, b), vjp, "dense_rows")


def take_rows(sources):
    """Stack rows picked from several nodes: ``sources`` is a list of
    ``(node, row indices)``; a vector node counts as a single row."""
    parents = tuple(n for n, _ in sources)
    blocks, spans = [], []
    start = 0
    for n, idx in sources:
        idx = np.asarray(idx, dtype=np.intp)
        v = n.value if n.value.ndim == 2 else n.value[None, :]
        blocks.append(v[idx])
        spans.append((start, start + idx.size, idx, n.value.shape))
        start += idx.size

    def vjp(g):
        out = []
        for a, b_, idx, shape in spans:
            rows = shape[0] if len(shape) == 2 else 1
            acc = np.zeros((rows, g.shape[1]))
            np.add.at(acc, idx, g[a:b_])
            out.append(acc if len(shape) == 2 else acc[0])
        return tuple(out)

    return Node(np.concatenate(blocks, axis=0), parents, vjp, "take_rows")


def hcat(nodes):
    """Concatenate matrices along columns."""
    cuts = np.cumsum([n.value.shape[1] for n in nodes])[:-1]
    return Node(np.concatenate([n.value for n in nodes], axis=1), tuple(nodes),
                lambda g: tuple(np.split(g, cuts, axis=1)), "hcat")


def col_slice(a, start, stop):
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return Node(a.value[:, start:stop], (a,), vjp, "col_slice")


def softmax_ce_rows(logits, targets, weights):
    """``sum_i weights[i] * -log softmax(logits[i])[targets[i]]``."""
    lv = logits.value
    z = lv - lv.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1)
    rows = np.arange(lv.shape[0])
    targets = np.asarray(targets, dtype=np.intp)
    weights = np.asarray(weights, dtype=np.float64)
    loss = float(weights @ (np.log(s) - z[rows, targets]))

    def vjp(g):
        d = e / s[:, None]
        d[rows, targets] -= 1.0
        return (float(g) * weights[:, None] * d,)

    return Node(np.asarray(loss), (logits,), vjp, "softmax_ce_rows")


def sq_error_rows(a, target, weights, mask=None):
    """``sum_i weights[i] * |mask * (a[i] - target[i])|^2``."""
    diff = a.value - target
    if mask is not None:
        diff = diff * mask
    weights = np.asarray(weights, dtype=np.float64)
    loss = float(weights @ np.einsum("ij,ij->i", diff, diff))
    return Node(np.asarray(loss), (a,), lambda g: (2.0 * float(g) * weights[:, None] * diff,),
                "sq_error_rows")


_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "neg": neg,
    "matmul": matmul, "linear": linear, "dense_tanh": dense_tanh,
    "concat": concat, "slice": slice_, "tanh": tanh, "sigmoid": sigmoid,
    "relu": relu, "exp": exp, "square": square, "sqrt": sqrt, "sum": sum_,
    "mean": mean, "dot": dot, "add_n": add_n, "affine_const": affine_const,
    "softmax_ce": softmax_ce, "sq_error": sq_error, "dense_rows": dense_rows,
    "take_rows": take_rows, "hcat": hcat, "col_slice": col_slice,
    "softmax_ce_rows": softmax_ce_rows, "sq_error_rows": sq_error_rows,
}


def op_set():
    """Names of the supported primitives."""
    return sorted(_PRIMITIVES)


# ---------------------------------------------------------------------------
# backward pass

def _toposort(root):
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
            if p.needs_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, seed_grad=1.0):
    """Propagate ``d root`` to every reachable parameter leaf.

    Intermediate adjoints live only for the duration of the call; parameter
    leaves accumulate into ``.grad``. A non-finite adjoint raises
    ``GradientError`` naming the op that produced it, and leaves the
    parameter gradients untouched.
    """
    if root.value.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.value.shape}")
    if not root.needs_grad:
        return []
    order = _toposort(root)
    leaf_grads = _propagate(order, root, seed_grad, check=False)
    if not all(math.isfinite(float(g.sum())) for _, g in leaf_grads):
        _propagate(order, root, seed_grad, check=True)
        raise GradientError("non-finite gradient reached a parameter")
    params, seen = [], set()
    for node, g in leaf_grads:
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        node.grad += g
        if id(node) not in seen:
            seen.add(id(node))
            params.append(node)
    return params


def _propagate(order, root, seed_grad, check):
    adj = {id(root): np.asarray(float(seed_grad))}
    leaves = []
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            leaves.append((node, g))
            continue
        grads = node.vjp(g)
        for p, pg in zip(node.parents, grads):
            if pg is None or not p.needs_grad:
                continue
            if check and not math.isfinite(float(np.sum(pg))):
                raise GradientError(f"non-finite gradient produced by op '{node.op}'")
            key = id(p)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    return leaves


def forward_backward(root, seed_grad=1.0):
    """Gradient map ``name -> d root / d param`` for every reachable parameter.

    Leaf gradients are reset first, so the map reflects this root only.
    """
    for node in _toposort(root):
        if isinstance(node, Param):
            node.grad = None
    params = backward(root, seed_grad)
    return {p.name: p.grad for p in params}


# ---------------------------------------------------------------------------
# parameters and optimizer

class ParamStore:
    """Named parameter leaves with persistent identity across steps."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(name, np.array(value, dtype=np.float64))
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    @contextmanager
    def frozen(self):
        """Treat every parameter as a constant inside the block."""
        for p in self._params.values():
            p.needs_grad = False
        try:
            yield self
        finally:
            for p in self._params.values():
                p.needs_grad = True

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def grads(self):
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.value))
                for n, p in self._params.items()}

    def snapshot(self):
        return {n: p.value.copy() for n, p in self._params.items()}

    def load(self, arrays):
        for n, v in arrays.items():
            if n not in self._params:
                raise KeyError(f"unknown parameter {n!r}")
            if self._params[n].value.shape != np.shape(v):
                raise ValueError(f"shape mismatch for {n!r}")
            self._params[n].value = np.array(v, dtype=np.float64)

    def num_values(self):
        return sum(p.value.size for p in self._params.values())


class Adam:
    def __init__(self, store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in store._params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in store._params.items()}

    def step(self, clip=None):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        grads = self.store.grads()
        if clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > clip:
                grads = {n: g * (clip / norm) for n, g in grads.items()}
        for n, p in self.store._params.items():
            g = grads[n]
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m = self.m[n] = b1 * self.m[n] + (1 - b1) * g
            v = self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p.value)):
                raise GradientError(f"non-finite parameter {n!r} after update")


# ---------------------------------------------------------------------------
# verification

def check_gradient(fn, point, h=1e-4, grad=None):
    """Max relative error between an analytic gradient and central differences.

    ``fn(x)`` must return ``(value, gradient)`` when ``grad`` is None, or a
    plain float when ``grad`` is supplied explicitly.
    """
    x = np.array(point, dtype=np.float64)
    if grad is None:
        _, analytic = fn(x)
        scalar = lambda y: fn(y)[0]  # noqa: E731
    else:
        analytic = grad
        scalar = fn
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(scalar(x))
        flat[i] = old - h
        fm = float(scalar(x))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientError(f"non-finite function value probing coordinate {i}")
        num = (fp - fm) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout:  b"SCGCKPT\n" | u32 header length | UTF-8 JSON header | payloads
# header:  {"format_version", "schema", "latent_dim", "feature_dim", "meta",
#           "entries": [{"name", "shape"}...]}
# payloads are row-major little-endian float64, concatenated in entry order.

CHECKPOINT_MAGIC = b"SCGCKPT\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays, schema, latent_dim, feature_dim, meta=None):
    entries = [{"name": n, "shape": list(np.shape(a))} for n, a in arrays.items()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "schema": schema,
        "latent_dim": int(latent_dim),
        "feature_dim": int(feature_dim),
        "meta": meta or {},
        "entries": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(header, {name: array})``."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen])
    off += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    arrays = {}
    for e in header["entries"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[e["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return header, arrays
