"""Small define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` evaluates every op eagerly as it is recorded and keeps a
vector-Jacobian closure per node.  Learnable arrays live in a
:class:`ParamStore`; ``tape.param(name)`` exposes them as leaf nodes whose
gradients are accumulated straight into the store during :meth:`Tape.backward`.

Only the handful of ops the models need are provided.  Binary elementwise ops
follow numpy broadcasting and reduce gradients back to the input shapes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised while recording an op whose inputs have incompatible shapes."""


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named parameters with gradient buffers and Adam moments."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=DTYPE)
        self._params[name] = Param(
            value=value,
            grad=np.zeros_like(value),
            m=np.zeros_like(value),
            v=np.zeros_like(value),
        )
        return value

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Param:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def value(self, name) -> np.ndarray:
        return self._params[name].value

    def grad(self, name) -> np.ndarray:
        return self._params[name].grad

    def zero_grad(self):
        for p in self._params.values():
            p.grad.fill(0.0)

    def reset_optimizer(self):
        for p in self._params.values():
            p.m.fill(0.0)
            p.v.fill(0.0)
            p.step = 0

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for name, arr in values.items():
            p = self._params[name]
            if p.value.shape != np.shape(arr):
                raise ShapeError(f"{name}: expected shape {p.value.shape}, got {np.shape(arr)}")
            p.value[...] = arr

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, p in self._params.items():
            other._params[name] = Param(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy(), p.step)
        return other

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name].value).tobytes())
        return h.hexdigest()

    def n_values(self) -> int:
        return sum(p.value.size for p in self._params.values())


class Node:
    __slots__ = ("id", "op", "inputs", "value", "_grad", "_vjp", "param_name")

    def __init__(self, id, op, inputs, value, vjp=None, param_name=None):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self._grad = None
        self._vjp = vjp
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        """d(seed)/d(node) after backward; zeros where the seed does not depend on the node."""
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"


def _live(node):
    """Whether gradients must flow into ``node`` (constants never need them)."""
    return node.op != "const"


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tape:
    """Records ops in topological order; values are computed on insertion.

    ``train`` toggles dropout.  Dropout masks come from ``rng`` so two tapes
    built with equally seeded generators produce identical values.
    """

    def __init__(self, params: ParamStore | None = None, train: bool = False, rng=None):
        self.params = params if params is not None else ParamStore()
        self.train = train
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}

    # -- node construction -------------------------------------------------

    def _push(self, op, inputs, value, vjp=None, param_name=None) -> Node:
        for x in inputs:
            if x.id >= len(self.nodes) or self.nodes[x.id] is not x:
                raise ValueError(f"{op}: input node {x.id} does not belong to this tape")
        node = Node(len(self.nodes), op, tuple(inputs), value, vjp, param_name)
        self.nodes.append(node)
        return node

    def _err(self, op, msg):
        return ShapeError(f"node {len(self.nodes)} ({op}): {msg}")

    def const(self, value) -> Node:
        return self._push("const", (), np.asarray(value, dtype=DTYPE))

    def param(self, name: str) -> Node:
        node = self._param_nodes.get(name)
        if node is None:
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            node = self._push("param", (), self.params.value(name), param_name=name)
            self._param_nodes[name] = node
        return node

    def _lift(self, x) -> Node:
        return x if isinstance(x, Node) else self.const(x)

    # -- elementwise binary -------------------------------------------------

    def _broadcast(self, op, a, b):
        try:
            return np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise self._err(op, f"cannot broadcast {a.shape} with {b.shape}") from None

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._broadcast("add", a, b)
        sa, sb = a.shape, b.shape
        ka, kb = _live(a), _live(b)
        return self._push("add", (a, b), a.value + b.value,
                          lambda g: (ka and _unbroadcast(g, sa), kb and _unbroadcast(g, sb)))

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._broadcast("sub", a, b)
        sa, sb = a.shape, b.shape
        ka, kb = _live(a), _live(b)
        return self._push("sub", (a, b), a.value - b.value,
                          lambda g: (ka and _unbroadcast(g, sa), kb and -_unbroadcast(g, sb)))

    def mul(self, a, b) -> Node:
        """Hadamard product (with broadcasting)."""
        a, b = self._lift(a), self._lift(b)
        self._broadcast("mul", a, b)
        av, bv = a.value, b.value
        ka, kb = _live(a), _live(b)
        return self._push("mul", (a, b), av * bv,
                          lambda g: (ka and _unbroadcast(g * bv, av.shape), kb and _unbroadcast(g * av, bv.shape)))

    def div(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._broadcast("div", a, b)
        av, bv = a.value, b.value
        out = av / bv
        ka, kb = _live(a), _live(b)
        return self._push("div", (a, b), out,
                          lambda g: (ka and _unbroadcast(g / bv, av.shape),
                                     kb and _unbroadcast(-g * out / bv, bv.shape)))

    # -- linear algebra -----------------------------------------------------

    def matmul(self, a, w) -> Node:
        """``a[..., m] @ w[m, n]``; a batch of matrix-vector products."""
        a, w = self._lift(a), self._lift(w)
        if w.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != w.shape[0]:
            raise self._err("matmul", f"cannot multiply {a.shape} by {w.shape}")
        av, wv = a.value, w.value

        ka, kw = _live(a), _live(w)

        def vjp(g):
            ga = g @ wv.T if ka else None
            gw = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if kw else None
            return ga, gw

        return self._push("matmul", (a, w), av @ wv, vjp)

    def inner(self, a, b) -> Node:
        """Inner product over the last axis."""
        a, b = self._lift(a), self._lift(b)
        if a.shape != b.shape:
            raise self._err("inner", f"shape mismatch {a.shape} vs {b.shape}")
        av, bv = a.value, b.value
        return self._push("inner", (a, b), np.einsum("...k,...k->...", av, bv),
                          lambda g: (g[..., None] * bv, g[..., None] * av))

    def scale(self, a, c: float) -> Node:
        a = self._lift(a)
        c = float(c)
        return self._push("scale", (a,), a.value * c, lambda g: (g * c,))

    # -- shape ops ----------------------------------------------------------

    def concat(self, xs, axis=-1) -> Node:
        xs = [self._lift(x) for x in xs]
        try:
            out = np.concatenate([x.value for x in xs], axis=axis)
        except ValueError as exc:
            raise self._err("concat", str(exc)) from None
        ax = axis % out.ndim
        splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
        return self._push("concat", xs, out, lambda g: tuple(np.split(g, splits, axis=ax)))

    def reshape(self, a, shape) -> Node:
        a = self._lift(a)
        src = a.shape
        try:
            out = a.value.reshape(shape)
        except ValueError as exc:
            raise self._err("reshape", str(exc)) from None
        return self._push("reshape", (a,), out, lambda g: (g.reshape(src),))

    def getitem(self, a, key) -> Node:
        """Basic (slice/int) indexing."""
        a = self._lift(a)
        src = a.shape

        def vjp(g):
            out = np.zeros(src, dtype=DTYPE)
            out[key] = g
            return (out,)

        return self._push("getitem", (a,), a.value[key], vjp)

    def gather(self, table, idx) -> Node:
        """Rows ``table[idx]``; the gradient is scattered back row by row."""
        table = self._lift(table)
        idx = np.asarray(idx)
        if idx.dtype.kind not in "iu":
            raise self._err("gather", "indices must be integers")
        n = table.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise self._err("gather", f"index out of range for table with {n} rows")
        tail = table.shape[1:]

        flat = idx.reshape(-1)

        def vjp(g):
            g = g.reshape((len(flat), -1))
            out = np.stack([np.bincount(flat, weights=g[:, j], minlength=n) for j in range(g.shape[1])], axis=1)
            return (out.reshape((n,) + tail),)

        return self._push("gather", (table,), table.value[idx], vjp)

    def sum(self, a, axis=None, keepdims=False) -> Node:
        a = self._lift(a)
        src = a.shape
        out = a.value.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src),)

        return self._push("sum", (a,), np.asarray(out, dtype=DTYPE), vjp)

    # -- elementwise unary --------------------------------------------------

    def square(self, a) -> Node:
        a = self._lift(a)
        av = a.value
        return self._push("square", (a,), av * av, lambda g: (2.0 * g * av,))

    def exp(self, a) -> Node:
        a = self._lift(a)
        out = np.exp(a.value)
        return self._push("exp", (a,), out, lambda g: (g * out,))

    def log(self, a) -> Node:
        a = self._lift(a)
        av = a.value
        return self._push("log", (a,), np.log(av), lambda g: (g / av,))

    def sigmoid(self, a) -> Node:
        a = self._lift(a)
        out = expit(a.value)
        return self._push("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))

    def relu(self, a) -> Node:
        a = self._lift(a)
        pos = a.value > 0
        return self._push("relu", (a,), np.where(pos, a.value, 0.0), lambda g: (g * pos,))

    def clip(self, a, lo, hi) -> Node:
        """Clamp values; the gradient is zero where clamping is active."""
        a = self._lift(a)
        inside = (a.value >= lo) & (a.value <= hi)
        return self._push("clip", (a,), np.clip(a.value, lo, hi), lambda g: (g * inside,))

    def masked_softmax(self, a, mask=None, axis=-1) -> Node:
        """Softmax over ``axis`` restricted to ``mask``; masked entries are 0.

        A slice with no valid entries yields all zeros.
        """
        a = self._lift(a)
        x = a.value
        if mask is None:
            mask = np.ones(x.shape, dtype=bool)
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        shifted = np.where(mask, x, -np.inf)
        top = shifted.max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        ex = np.where(mask, np.exp(np.where(mask, x - top, 0.0)), 0.0)
        den = ex.sum(axis=axis, keepdims=True)
        out = ex / np.where(den > 0, den, 1.0)

        def vjp(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),)

        return self._push("masked_softmax", (a,), out, vjp)

    def dropout(self, a, keep_prob: float) -> Node:
        """Inverted dropout; identity when the tape is not in train mode."""
        a = self._lift(a)
        if not self.train or keep_prob >= 1.0:
            return a
        if not 0.0 < keep_prob < 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
        mask = (self.rng.random(a.shape) < keep_prob) / keep_prob
        return self._push("dropout", (a,), a.value * mask, lambda g: (g * mask,))

    # -- evaluation -----------------------------------------------------------

    def forward(self, *nodes):
        """Values at the requested nodes (already computed on insertion)."""
        vals = [n.value for n in nodes]
        return vals[0] if len(vals) == 1 else vals

    def backward(self, seed: Node):
        """Accumulate d(seed)/d(param) into the store's gradient buffers."""
        if seed.value.size != 1:
            raise ValueError(f"backward seed must be scalar, node {seed.id} has shape {seed.shape}")
        grads: list = [None] * len(self.nodes)
        grads[seed.id] = np.ones_like(seed.value)
        for node in reversed(self.nodes[: seed.id + 1]):
            g = grads[node.id]
            if g is None:
                continue
            node.grad = g
            if node.param_name is not None:
                self.params.grad(node.param_name)[...] += g
                continue
            if node._vjp is None:
                continue
            for x, gx in zip(node.inputs, node._vjp(g)):
                if x.op == "const":
                    continue
                if grads[x.id] is None:
                    grads[x.id] = gx
                else:
                    grads[x.id] = grads[x.id] + gx


def grad_check(build_fn, point: ParamStore, eps: float = 1e-5, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``build_fn(tape)`` must return a scalar node.  The store ``point`` is
    perturbed in place and restored.  With ``max_coords`` only that many
    coordinates per parameter are probed, preferring ones with non-zero
    analytic gradient.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate():
        tape = Tape(point, train=False)
        out = build_fn(tape)
        return tape, out

    point.zero_grad()
    tape, out = evaluate()
    tape.backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in point.items():
        analytic = p.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError(f"non-finite analytic gradient in {name!r}")
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            nz = np.flatnonzero(analytic.reshape(-1))
            z = np.setdiff1d(coords, nz)
            take_nz = min(len(nz), max_coords - max_coords // 4)
            pick = list(rng.choice(nz, take_nz, replace=False)) if take_nz else []
            take_z = min(len(z), max_coords - len(pick))
            pick += list(rng.choice(z, take_z, replace=False)) if take_z else []
            coords = np.array(sorted(pick), dtype=int)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(evaluate()[1].value)
            flat[c] = orig - eps
            f_minus = float(evaluate()[1].value)
            flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite function value while perturbing {name!r}[{c}]")
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic.reshape(-1)[c]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    point.zero_grad()
    return worst


def directional_check(build_fn, point: ParamStore, n_dirs: int = 3, eps: float = 1e-5, seed: int = 0) -> float:
    """Relative gap between ``grad · d`` and a central difference along ``d``.

    Each random Gaussian direction ``d`` spans every parameter at once, so a
    wrong gradient in any coordinate shows up at the cost of two function
    evaluations.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point.zero_grad()
    tape = Tape(point, train=False)
    tape.backward(build_fn(tape))
    grads = {name: p.grad.copy() for name, p in point.items()}
    base = {name: p.value.copy() for name, p in point.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_dirs):
        d = {name: rng.normal(size=v.shape) for name, v in base.items()}
        analytic = sum(float(np.sum(grads[n] * d[n])) for n in base)
        vals = []
        for sign in (1.0, -1.0):
            for name, p in point.items():
                p.value[...] = base[name] + sign * eps * d[name]
            vals.append(float(build_fn(Tape(point, train=False)).value))
        for name, p in point.items():
            p.value[...] = base[name]
        numeric = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric)))
    point.zero_grad()
    return worst
