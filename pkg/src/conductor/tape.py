"""Dense float64 tensors with reverse-mode differentiation over a recorded trace.

A model is written once as ``fn(ops, *inputs)`` against a small set of
primitives. Running it with :class:`Eager` evaluates it directly; running it
through :func:`record_forward` records every primitive application into an
:class:`EvaluationTrace`, from which :func:`backward` and :func:`grad` return
adjoints for *any* recorded node, including intermediate activations.

Both paths call the same kernel functions in the same order, so a traced
forward reproduces the eager forward bit for bit.

``ops.mark(key, x)`` names a node (a neuron site, a residual-stream cut, ...).
It is free in a trace; under :class:`Eager` it is the hook point used by the
finite-difference oracle to perturb activations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Hashable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "TraceError",
    "UnsupportedOpError",
    "Node",
    "EvaluationTrace",
    "NodeRef",
    "Var",
    "Eager",
    "Tracer",
    "PRIMITIVES",
    "record_forward",
    "backward",
    "grad",
    "finite_diff",
    "finite_diff_batched",
]


class TraceError(ValueError):
    pass


class UnsupportedOpError(TraceError):
    def __init__(self, name: str):
        super().__init__(f"unsupported primitive op: {name!r}")
        self.op = name


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# primitives: forward(*values, **attrs) -> (out, saved)
#             backward(g, out, saved, values, attrs, needs) -> input grads
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _primitive(name):
    def wrap(cls):
        PRIMITIVES[name] = Primitive(name, cls.forward, cls.backward)
        return cls

    return wrap


@_primitive("add")
class _Add:
    @staticmethod
    def forward(a, b):
        return a + b, None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        a, b = vals
        return (
            unbroadcast(g, a.shape) if needs[0] else None,
            unbroadcast(g, b.shape) if needs[1] else None,
        )


@_primitive("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        return a - b, None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        a, b = vals
        return (
            unbroadcast(g, a.shape) if needs[0] else None,
            unbroadcast(-g, b.shape) if needs[1] else None,
        )


@_primitive("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        return a * b, None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        a, b = vals
        return (
            unbroadcast(g * b, a.shape) if needs[0] else None,
            unbroadcast(g * a, b.shape) if needs[1] else None,
        )


@_primitive("scale")
class _Scale:
    @staticmethod
    def forward(a, c):
        return a * c, None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        return (g * attrs["c"],)


@_primitive("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise TraceError("matmul operands must be at least 2-D")
        return np.matmul(a, b), None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        a, b = vals
        ga = gb = None
        if needs[0]:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        if needs[1]:
            gb = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb


@_primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(a):
        return np.swapaxes(a, -1, -2), None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        return (np.swapaxes(g, -1, -2),)


@_primitive("layernorm")
class _LayerNorm:
    @staticmethod
    def forward(x, eps=1e-12):
        return kernels.layernorm_fwd(x, eps)

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        return (kernels.layernorm_bwd(g, out, saved),)


@_primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(x):
        return kernels.softmax_fwd(x), None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        return (kernels.softmax_bwd(g, out),)


@_primitive("gelu")
class _Gelu:
    @staticmethod
    def forward(x):
        return kernels.gelu_fwd(x), None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        return (kernels.gelu_bwd(g, vals[0]),)


@_primitive("tanh")
class _Tanh:
    @staticmethod
    def forward(x):
        return np.tanh(x), None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        return (g * (1.0 - out * out),)


@_primitive("slice")
class _Slice:
    @staticmethod
    def forward(x, axis, start, stop):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        return x[tuple(idx)], None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        (x,) = vals
        gx = np.zeros_like(x)
        idx = [slice(None)] * x.ndim
        idx[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
        gx[tuple(idx)] = g
        return (gx,)


@_primitive("concat")
class _Concat:
    @staticmethod
    def forward(*xs, axis):
        if axis >= 0:
            raise TraceError("concat axis must be negative (counted from the end)")
        ndim = max(x.ndim for x in xs)
        lead = np.broadcast_shapes(*[(1,) * (ndim - x.ndim) + x.shape[: x.ndim + axis] for x in xs])
        xs = [np.broadcast_to(x, lead + x.shape[x.ndim + axis :]) for x in xs]
        return np.concatenate(xs, axis=axis), None

    @staticmethod
    def backward(g, out, saved, vals, attrs, needs):
        axis = attrs["axis"]
        grads = []
        start = 0
        for x, need in zip(vals, needs):
            w = x.shape[axis]
            if need:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + w)
                grads.append(unbroadcast(g[tuple(idx)], x.shape))
            else:
                grads.append(None)
            start += w
        return tuple(grads)


# --------------------------------------------------------------------------
# trace
# --------------------------------------------------------------------------


class Node:
    __slots__ = ("op", "inputs", "value", "attrs", "saved", "requires_grad")

    def __init__(self, op, inputs, value, attrs, saved, requires_grad):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs
        self.saved = saved
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Node({self.op}, inputs={self.inputs}, shape={self.value.shape})"


class EvaluationTrace:
    """Nodes in topological order; a node's inputs always precede it."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.marks: dict[Hashable, int] = {}
        self.output: int | None = None

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, i) -> Node:
        return self.nodes[i]

    def value(self, key) -> np.ndarray:
        """Value of a node given by id or by mark key."""
        if isinstance(key, (int, np.integer)):
            return self.nodes[key].value
        return self.nodes[self.marks[key]].value

    def replay(self) -> list[np.ndarray]:
        """Re-execute every recorded primitive from its recorded inputs."""
        out = []
        for node in self.nodes:
            if node.op in ("input", "const"):
                out.append(node.value)
                continue
            prim = PRIMITIVES[node.op]
            vals = [out[i] for i in node.inputs]
            out.append(prim.forward(*vals, **node.attrs)[0])
        return out


@dataclass(frozen=True)
class NodeRef:
    """An element of a recorded tensor. ``index=None`` means the whole node."""

    node: int
    index: int | None = None


class Var:
    __slots__ = ("id", "value", "tracer")

    def __init__(self, id, value, tracer):
        self.id = id
        self.value = value
        self.tracer = tracer

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"


_ATTR_NAMES = {
    "scale": ("c",),
    "layernorm": ("eps",),
    "slice": ("axis", "start", "stop"),
    "concat": ("axis",),
}
_ARITY = {
    "add": 2, "sub": 2, "mul": 2, "matmul": 2, "scale": 1, "transpose": 1,
    "layernorm": 1, "softmax": 1, "gelu": 1, "tanh": 1, "slice": 1,
}


def _split_args(name, args, kwargs):
    n = _ARITY.get(name)
    if n is None:  # variadic (concat)
        tensors, extra = list(args), ()
    else:
        tensors, extra = list(args[:n]), args[n:]
    attrs = dict(zip(_ATTR_NAMES.get(name, ()), extra))
    attrs.update(kwargs)
    return tensors, attrs


class Eager:
    """Direct evaluation. ``hooks`` maps mark keys to ``f(value) -> value``."""

    def __init__(self, hooks: dict | None = None):
        self.hooks = hooks or {}

    def const(self, value, requires_grad=False):
        return value

    def mark(self, key, x):
        hook = self.hooks.get(key)
        return x if hook is None else hook(x)

    def __getattr__(self, name):
        prim = PRIMITIVES.get(name)
        if prim is None:
            raise UnsupportedOpError(name)

        def apply(*args, **kwargs):
            tensors, attrs = _split_args(name, args, kwargs)
            return prim.forward(*tensors, **attrs)[0]

        return apply


class Tracer:
    """Records primitive applications into an :class:`EvaluationTrace`."""

    def __init__(self):
        self.trace = EvaluationTrace()

    def _push(self, op, inputs, value, attrs=None, saved=None, requires_grad=False):
        self.trace.nodes.append(Node(op, inputs, value, attrs or {}, saved, requires_grad))
        return Var(len(self.trace.nodes) - 1, value, self)

    def input(self, value, requires_grad=True) -> Var:
        return self._push("input", (), _as_f64(value), requires_grad=requires_grad)

    def const(self, value, requires_grad=False) -> Var:
        return self._push("const", (), _as_f64(value), requires_grad=requires_grad)

    def mark(self, key, x: Var) -> Var:
        self._check(x)
        self.trace.marks[key] = x.id
        return x

    def _check(self, v):
        if not isinstance(v, Var):
            raise TraceError(
                f"traced op received {type(v).__name__}; wrap raw arrays with ops.const()"
            )
        if v.tracer is not self:
            raise TraceError("Var belongs to a different trace")

    def __getattr__(self, name):
        prim = PRIMITIVES.get(name)
        if prim is None:
            raise UnsupportedOpError(name)

        def apply(*args, **kwargs):
            tensors, attrs = _split_args(name, args, kwargs)
            for t in tensors:
                self._check(t)
            out, saved = prim.forward(*[t.value for t in tensors], **attrs)
            rg = any(self.trace.nodes[t.id].requires_grad for t in tensors)
            return self._push(name, tuple(t.id for t in tensors), out, attrs, saved, rg)

        return apply


def record_forward(fn: Callable, *inputs, requires_grad=True) -> tuple[np.ndarray, EvaluationTrace]:
    """Run ``fn(ops, *inputs)`` under a tracer.

    Returns the output value and the trace; ``trace.output`` is the id of the
    output node and the inputs occupy node ids ``0..len(inputs)-1``.
    """
    tracer = Tracer()
    args = [tracer.input(x, requires_grad=requires_grad) for x in inputs]
    out = fn(tracer, *args)
    if not isinstance(out, Var) or out.tracer is not tracer:
        raise TraceError("traced function must return a Var produced by its tracer")
    tracer.trace.output = out.id
    return out.value, tracer.trace


def backward(trace: EvaluationTrace, seeds: dict[int, np.ndarray], keep: Iterable[int] | None = None):
    """Reverse accumulation from ``seeds`` (node id -> adjoint of that node).

    Returns a dict of adjoints for the node ids in ``keep`` (all reached nodes
    when ``keep`` is None). Nodes absent from the result have zero adjoint.
    """
    keep = None if keep is None else set(keep)
    adj: dict[int, np.ndarray] = {}
    for i, s in seeds.items():
        adj[i] = np.broadcast_to(_as_f64(s), trace.nodes[i].value.shape).copy()
    out = {}
    for i in range(max(seeds), -1, -1):
        g = adj.pop(i, None)
        if g is None:
            continue
        if keep is None or i in keep:
            out[i] = g
        node = trace.nodes[i]
        if not node.inputs:
            continue
        vals = [trace.nodes[j].value for j in node.inputs]
        needs = [trace.nodes[j].requires_grad for j in node.inputs]
        if not any(needs):
            continue
        grads = PRIMITIVES[node.op].backward(g, node.value, node.saved, vals, node.attrs, needs)
        for j, gj, need in zip(node.inputs, grads, needs):
            if not need or gj is None:
                continue
            if j in adj:
                adj[j] = adj[j] + gj
            else:
                adj[j] = gj
    return out


def grad(trace: EvaluationTrace, target: NodeRef, wrt: Iterable[NodeRef]) -> dict[NodeRef, float]:
    """Derivatives of one scalar trace element with respect to other elements."""
    tnode = trace.nodes[target.node]
    if target.index is None:
        if tnode.value.size != 1:
            raise TraceError(f"target node {target.node} is not scalar (shape {tnode.value.shape})")
        index = 0
    else:
        index = target.index
    if not 0 <= index < tnode.value.size:
        raise TraceError(f"target index {index} out of range")
    wrt = list(wrt)
    for r in wrt:
        if r.node > target.node:
            raise TraceError(f"wrt node {r.node} is recorded after target node {target.node}")
    seed = np.zeros(tnode.value.size)
    seed[index] = 1.0
    adj = backward(trace, {target.node: seed.reshape(tnode.value.shape)}, keep={r.node for r in wrt})
    out = {}
    for r in wrt:
        g = adj.get(r.node)
        if g is None:
            out[r] = 0.0
        elif r.index is None:
            if g.size != 1:
                raise TraceError(f"wrt node {r.node} is not scalar; give an element index")
            out[r] = float(g.reshape(-1)[0])
        else:
            out[r] = float(g.reshape(-1)[r.index])
    return out


# --------------------------------------------------------------------------
# finite differences (oracle)
# --------------------------------------------------------------------------


def _perturbed_forward(fn, inputs, wrt, deltas):
    """Evaluate ``fn`` with each row of ``deltas`` added to the chosen tensor.

    ``wrt`` is ``("input", k)`` or ``("mark", key)``. ``deltas`` has shape
    ``(B,) + tensor.shape``; the result has a leading batch axis of size B.
    """
    kind, which = wrt
    if kind == "input":
        inputs = list(inputs)
        inputs[which] = _as_f64(inputs[which])[None] + deltas
        return fn(Eager(), *inputs)
    if kind == "mark":
        return fn(Eager({which: lambda x: x[None] + deltas}), *inputs)
    raise TraceError(f"unknown wrt kind {kind!r}")


def finite_diff(fn, inputs: Sequence[Any], target_index: int, wrt: tuple, step: float) -> float:
    """Central difference of output element ``target_index``.

    ``wrt`` is ``("input", k, flat_index)`` or ``("mark", key, flat_index)``.
    """
    return float(finite_diff_batched(fn, inputs, target_index, wrt[:2], [wrt[2]], step)[0])


def finite_diff_batched(fn, inputs, target_index: int, wrt: tuple, indices, step: float) -> np.ndarray:
    """Central differences for many elements of one tensor in a single batched pass.

    ``fn`` must broadcast over a leading batch axis.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    indices = np.asarray(list(indices), dtype=np.int64)
    kind, which = wrt
    if kind == "input":
        base = _as_f64(inputs[which])
    else:
        seen = {}
        fn(Eager({which: lambda x: seen.setdefault("v", x)}), *inputs)
        if "v" not in seen:
            raise TraceError(f"mark {which!r} was not reached by the function")
        base = _as_f64(seen["v"])
    m = len(indices)
    flat = base.reshape(-1)
    up = flat[indices] + step
    down = flat[indices] - step
    deltas = np.zeros((2 * m, flat.size))
    rows = np.arange(m)
    deltas[rows, indices] = up - flat[indices]
    deltas[m + rows, indices] = down - flat[indices]
    deltas = deltas.reshape((2 * m,) + base.shape)
    out = _perturbed_forward(fn, inputs, wrt, deltas)
    f = np.asarray(out).reshape(2 * m, -1)[:, target_index]
    d = (f[:m] - f[m:]) / (up - down)
    if not np.all(np.isfinite(d)):
        raise FloatingPointError("finite difference produced a non-finite value")
    return d
