"""Small reverse-mode differentiation engine over dense float64 arrays.

Nodes are evaluated eagerly. Each node remembers its inputs and a closure that
pushes its gradient onto them; :func:`backward` walks the reachable subgraph in
strict reverse creation order. Values may be vectors ``(d,)`` or row batches
``(n, d)``; most ops broadcast like numpy.

A :class:`Tape` collects the nodes created while it is active. Freezing a tape
turns its nodes into constants, which is how truncated back-propagation through
time is realised by the trainer.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_active_tapes: list["Tape"] = []
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, expected, actual):
        super().__init__(f"{op}: expected {expected}, got {actual}")
        self.op = op
        self.expected = expected
        self.actual = actual


class Node:
    __slots__ = ("value", "_grad", "op", "inputs", "_backward", "id", "requires_grad", "name")

    def __init__(self, value, op: str = "const", inputs: tuple = (), backward_fn=None,
                 requires_grad: bool | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self._grad = None
        self.op = op
        self.inputs = tuple(inputs)
        self._backward = backward_fn
        self.id = next(_ids)
        if requires_grad is None:
            requires_grad = any(i.requires_grad for i in self.inputs)
        self.requires_grad = requires_grad
        self.name = name
        if _active_tapes and self.inputs:
            _active_tapes[-1].nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else np.asarray(g, dtype=DTYPE)

    def zero_grad(self):
        self._grad = None

    def _accumulate(self, g):
        if self._grad is None:
            self._grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.value.shape)
        else:
            self._grad += g

    def freeze(self):
        """Detach this node from its inputs; its value becomes a constant."""
        self.inputs = ()
        self._backward = None
        self.requires_grad = False
        self._grad = None
        self.op = "const"

    @property
    def is_leaf(self) -> bool:
        return not self.inputs

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, id={self.id})"


def parameter(value, name: str | None = None) -> Node:
    return Node(value, op="param", requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, op="const", requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


class Tape:
    """Append-only record of the nodes built while the tape is active."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def freeze(self):
        for n in self.nodes:
            n.freeze()
        self.nodes = []

    def backward(self, root: Node):
        backward(root)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class no_grad:
    """Context in which ops produce constants (evaluation passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _make(value, op, inputs, backward_fn) -> Node:
    inputs = tuple(inputs)
    if not _grad_enabled or not any(i.requires_grad for i in inputs):
        # pure constant subexpression, nothing to record
        return Node(value, op="const", requires_grad=False)
    return Node(value, op=op, inputs=inputs, backward_fn=backward_fn)


def _broadcast_shape(op, a: Node, b: Node):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- forward ops

def add(x, y) -> Node:
    x, y = as_node(x), as_node(y)
    _broadcast_shape("add", x, y)

    def bw(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g, x.shape))
        if y.requires_grad:
            y._accumulate(_unbroadcast(g, y.shape))

    return _make(x.value + y.value, "add", (x, y), bw)


def sub(x, y) -> Node:
    x, y = as_node(x), as_node(y)
    _broadcast_shape("sub", x, y)

    def bw(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g, x.shape))
        if y.requires_grad:
            y._accumulate(_unbroadcast(-g, y.shape))

    return _make(x.value - y.value, "sub", (x, y), bw)


def hadamard(x, y) -> Node:
    x, y = as_node(x), as_node(y)
    _broadcast_shape("hadamard", x, y)
    xv, yv = x.value, y.value

    def bw(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g * yv, x.shape))
        if y.requires_grad:
            y._accumulate(_unbroadcast(g * xv, y.shape))

    return _make(xv * yv, "hadamard", (x, y), bw)


def scale(c: float, x) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(c * x.value, "scale", (x,), lambda g: x._accumulate(c * g))


def affine(W, x, b=None) -> Node:
    """``x @ W.T + b`` for a vector ``x`` of shape (in,) or a batch (n, in)."""
    W, x = as_node(W), as_node(x)
    if W.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError("affine", "W (out, in) with x (..., in)", (W.shape, x.shape))
    Wv, xv = W.value, x.value
    out = xv @ Wv.T
    if b is not None:
        b = as_node(b)
        if b.shape != (Wv.shape[0],):
            raise ShapeError("affine", (Wv.shape[0],), b.shape)
        out = out + b.value

    def bw(g):
        if W.requires_grad:
            W._accumulate(np.outer(g, xv) if xv.ndim == 1 else g.T @ xv)
        if x.requires_grad:
            x._accumulate(g @ Wv)
        if b is not None and b.requires_grad:
            b._accumulate(g if g.ndim == 1 else g.sum(axis=0))

    inputs = (W, x) if b is None else (W, x, b)
    return _make(out, "affine", inputs, bw)


def matmul(a, b) -> Node:
    """numpy ``a @ b`` restricted to 1-D/2-D operands."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", "a.shape[-1] == b.shape[0]", (a.shape, b.shape))
    a2 = av.reshape(1, -1) if av.ndim == 1 else av
    b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv

    def bw(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        if a.requires_grad:
            a._accumulate((g2 @ b2.T).reshape(a.shape))
        if b.requires_grad:
            b._accumulate((a2.T @ g2).reshape(b.shape))

    return _make(av @ bv, "matmul", (a, b), bw)


def concat(*xs, axis: int = -1) -> Node:
    nodes = [as_node(x) for x in xs]
    if not nodes:
        raise ShapeError("concat", "at least one operand", 0)
    ndim = nodes[0].value.ndim
    if any(n.value.ndim != ndim for n in nodes):
        raise ShapeError("concat", f"all operands {ndim}-D", [n.shape for n in nodes])
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", "matching non-concat dims", [n.shape for n in nodes]) from None
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for n, part in zip(nodes, np.split(g, splits, axis=axis)):
            if n.requires_grad:
                n._accumulate(part)

    return _make(out, "concat", nodes, bw)


def take_rows(sources: Sequence[tuple[Node, int | None]]) -> Node:
    """Stack rows drawn from several nodes into one (n, d) matrix.

    Each source is ``(node, row)``; ``row=None`` means the node itself is a
    vector. Used to gather per-entity latents living in different batches.
    """
    if not sources:
        raise ShapeError("take_rows", "at least one source", 0)
    rows = [n.value if r is None else n.value[r] for n, r in sources]
    width = rows[0].shape
    if any(r.shape != width or r.ndim != 1 for r in rows):
        raise ShapeError("take_rows", f"rows of shape {width}", [r.shape for r in rows])
    out = np.stack(rows)
    live = [(k, n, r) for k, (n, r) in enumerate(sources) if n.requires_grad]
    inputs = tuple({id(n): n for _, n, _ in live}.values())

    def bw(g):
        for k, n, r in live:
            if r is None:
                n._accumulate(g[k])
            else:
                if n._grad is None:
                    n._grad = np.zeros_like(n.value)
                n._grad[r] += g[k]

    if not live or not _grad_enabled:
        return constant(out)
    return Node(out, op="take_rows", inputs=inputs, backward_fn=bw)


def tanh(x) -> Node:
    x = as_node(x)
    y = np.tanh(x.value)
    return _make(y, "tanh", (x,), lambda g: x._accumulate(g * (1.0 - y * y)))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Node:
    x = as_node(x)
    y = _sigmoid(np.atleast_1d(x.value)).reshape(x.shape)
    return _make(y, "sigmoid", (x,), lambda g: x._accumulate(g * y * (1.0 - y)))


def softplus(x) -> Node:
    x = as_node(x)
    v = x.value
    y = np.logaddexp(0.0, v)
    s = _sigmoid(np.atleast_1d(v)).reshape(v.shape)
    return _make(y, "softplus", (x,), lambda g: x._accumulate(g * s))


def _softmax(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Node:
    """Softmax over the last axis."""
    x = as_node(x)
    y = _softmax(x.value)

    def bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, "softmax", (x,), bw)


def sum(x) -> Node:  # noqa: A001 - mirrors numpy naming
    x = as_node(x)
    shape = x.shape
    return _make(np.asarray(x.value.sum()), "sum", (x,),
                 lambda g: x._accumulate(np.broadcast_to(g, shape)))


def squared_error(a, b) -> Node:
    """Mean of squared differences over the last axis, summed over rows."""
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise ShapeError("squared_error", a.shape, b.shape)
    d = a.value - b.value
    n = a.shape[-1]

    def bw(g):
        gd = (2.0 / n) * g * d
        if a.requires_grad:
            a._accumulate(gd)
        if b.requires_grad:
            b._accumulate(-gd)

    return _make(np.asarray((d * d).sum() / n), "squared_error", (a, b), bw)


def cross_entropy(target, logits) -> Node:
    """``-sum(target * log_softmax(logits))`` over the last axis, summed over rows."""
    target, logits = as_node(target), as_node(logits)
    if target.shape != logits.shape:
        raise ShapeError("cross_entropy", logits.shape, target.shape)
    z = logits.value
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    logp = z - lse
    t = target.value
    p = np.exp(logp)

    def bw(g):
        if logits.requires_grad:
            logits._accumulate(g * (p * t.sum(axis=-1, keepdims=True) - t))
        if target.requires_grad:
            target._accumulate(-g * logp)

    return _make(np.asarray(-(t * logp).sum()), "cross_entropy", (target, logits), bw)


# ------------------------------------------------------------------- backward

def backward(root: Node):
    """Accumulate d(root)/d(leaf) into every reachable leaf parameter.

    Interior node gradients are reset first so a node reused across several
    backward calls (within a truncation window) does not double count.
    """
    if root.value.size != 1:
        raise ShapeError("backward", "scalar root", root.shape)
    if not root.requires_grad:
        return
    seen = {root.id: root}
    stack = [root]
    while stack:
        n = stack.pop()
        for i in n.inputs:
            if i.requires_grad and i.id not in seen:
                seen[i.id] = i
                stack.append(i)
    order = sorted(seen.values(), key=lambda n: n.id, reverse=True)
    for n in order:
        if n.inputs:
            n._grad = None
    root._grad = np.ones_like(root.value)
    for n in order:
        if n._backward is not None and n._grad is not None:
            n._backward(n._grad)


# ---------------------------------------------------------------- parameters

FAMILIES = ("readout", "intrinsic", "extrinsic", "space")


class ParameterStore:
    """Learnable tensors keyed by ``(family, type_key)`` then by name.

    ``type_key`` is a tuple of schema type ids: ``(j,)`` for readout and
    intrinsic, ``(j, i)`` for extrinsic, ``(i,)`` for space. The nodes handed
    out by :meth:`get` are the stored objects themselves, so every instance of
    a type shares them.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._groups: dict[tuple[str, tuple[str, ...]], dict[str, Node]] = {}

    def add(self, family: str, type_key: tuple[str, ...], name: str, shape,
            fan_in: int | None = None, init: float | np.ndarray | None = None) -> Node:
        if family not in FAMILIES:
            raise KeyError(f"unknown parameter family {family!r}")
        group = self._groups.setdefault((family, tuple(type_key)), {})
        if name in group:
            raise KeyError(f"duplicate parameter {family}/{'/'.join(type_key)}/{name}")
        shape = tuple(shape)
        if init is not None:
            value = np.broadcast_to(np.asarray(init, dtype=DTYPE), shape).copy()
        else:
            bound = 1.0 / math.sqrt(fan_in or shape[-1])
            value = self.rng.uniform(-bound, bound, size=shape)
        node = parameter(value, name=f"{family}/{'/'.join(type_key)}/{name}")
        group[name] = node
        return node

    def group(self, family: str, type_key: tuple[str, ...]) -> dict[str, Node]:
        return self._groups[(family, tuple(type_key))]

    def get(self, family: str, type_key: tuple[str, ...], name: str) -> Node:
        return self._groups[(family, tuple(type_key))][name]

    def keys(self):
        return list(self._groups)

    def items(self) -> Iterable[tuple[str, Node]]:
        """Flat ``(qualified_name, node)`` pairs in a deterministic order."""
        for fam, key in sorted(self._groups):
            for name in sorted(self._groups[(fam, key)]):
                yield f"{fam}/{'/'.join(key)}", name, self._groups[(fam, key)][name]

    def nodes(self) -> list[Node]:
        return [n for _, _, n in self.items()]

    def count(self) -> int:
        return int(np.sum([n.value.size for n in self.nodes()]))

    def zero_grad(self):
        for n in self.nodes():
            n.zero_grad()

    def to_dict(self) -> dict:
        out: dict[str, dict] = {}
        for key, name, node in self.items():
            out.setdefault(key, {})[name] = {
                "shape": list(node.shape),
                "data": node.value.ravel().tolist(),
            }
        return out

    def load_dict(self, data: dict):
        for key, name, node in self.items():
            try:
                entry = data[key][name]
            except KeyError:
                raise KeyError(f"checkpoint lacks parameter {key}/{name}") from None
            if tuple(entry["shape"]) != node.shape:
                raise ShapeError("load", node.shape, tuple(entry["shape"]))
            node.value[...] = np.asarray(entry["data"], dtype=DTYPE).reshape(node.shape)


# ----------------------------------------------------------------- optimisers

class SGD:
    kind = "sgd"

    def __init__(self, params: ParameterStore, lr: float = 1e-2):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.t = 0

    def step(self):
        self.t += 1
        for node in self.params.nodes():
            if node._grad is not None:
                node.value -= self.lr * node._grad
            node.zero_grad()

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "t": self.t}

    def load_state_dict(self, state: dict):
        self.t = int(state.get("t", 0))


class Adam:
    kind = "adam"

    def __init__(self, params: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n.name: np.zeros_like(n.value) for n in params.nodes()}
        self.v = {n.name: np.zeros_like(n.value) for n in params.nodes()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for node in self.params.nodes():
            g = node._grad
            m, v = self.m[node.name], self.v[node.name]
            if g is None:
                # moments still decay so the schedule matches a dense update
                m *= b1
                v *= b2
            else:
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
            node.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            node.zero_grad()

    def state_dict(self) -> dict:
        return {
            "kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "t": self.t,
            "m": {k: v.ravel().tolist() for k, v in self.m.items()},
            "v": {k: v.ravel().tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict):
        self.t = int(state.get("t", 0))
        for k in self.m:
            if k in state.get("m", {}):
                self.m[k][...] = np.asarray(state["m"][k]).reshape(self.m[k].shape)
                self.v[k][...] = np.asarray(state["v"][k]).reshape(self.v[k].shape)


def make_optimizer(kind: str, params: ParameterStore, lr: float, **hyper):
    if kind == "adam":
        return Adam(params, lr=lr, **hyper)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# --------------------------------------------------------- finite differences

def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g
