"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to on-tape :class:`Value`
objects. Calling :func:`backward` on a scalar output walks the tape in reverse
and returns exact gradients for every node that influenced the output.

Values without a node id (constants, or the result of ``stop_gradient``) take
part in the forward computation but never receive or pass on gradient.

Broadcasting is deliberately limited to adding a bias vector to the rows of an
array; every other shape coercion must be explicit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Value",
    "Tape",
    "Gradients",
    "Parameter",
    "constant",
    "forward",
    "backward",
    "grad_check",
    "OP_KINDS",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's shape rule."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Value:
    """A float64 array, optionally attached to a node on a tape."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 1000

    def __init__(self, data, node: int | None = None, tape: "Tape | None" = None):
        self.data = _as_f64(data)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def on_tape(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        where = f"node={self.node}" if self.node is not None else "const"
        return f"Value(shape={self.shape}, {where})"

    # operator sugar; every path goes through Tape.apply
    def _tape_for(self, other=None) -> "Tape":
        if self.tape is not None:
            return self.tape
        if isinstance(other, Value) and other.tape is not None:
            return other.tape
        return _CONST_TAPE

    def _lift(self, other) -> "Value":
        if isinstance(other, Value):
            return other
        arr = _as_f64(other)
        if arr.shape != self.shape:
            arr = np.broadcast_to(arr, self.shape).copy()
        return Value(arr)

    def __add__(self, other):
        return self._tape_for(other).apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self._lift(other).__add__(self)

    def __sub__(self, other):
        return self._tape_for(other).apply("subtract", self, self._lift(other))

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return self._tape_for().apply("scale", self, factor=float(other))
        return self._tape_for(other).apply("multiply", self, self._lift(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return self.__mul__(other)
        return self._lift(other).__mul__(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return self.__mul__(1.0 / float(other))
        return self._tape_for(other).apply("divide", self, self._lift(other))

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return self.__mul__(-1.0)

    def __matmul__(self, other):
        other = other if isinstance(other, Value) else Value(other)
        return self._tape_for(other).apply("matmul", self, other)

    def __getitem__(self, index):
        return self._tape_for().apply("slice", self, index=index)

    @property
    def T(self):
        return self._tape_for().apply("transpose", self)

    def sum(self, axis: int | None = None):
        return self._tape_for().apply("sum", self, axis=axis)

    def mean(self, axis: int | None = None):
        return self._tape_for().apply("mean", self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._tape_for().apply("reshape", self, shape=shape)

    def __getattr__(self, name):
        # unary op kinds as methods: x.tanh(), x.square(), ...
        if name in _UNARY:
            return lambda **attrs: self._tape_for().apply(name, self, **attrs)
        raise AttributeError(name)


def constant(data) -> Value:
    """A node-less value: used in forward computation, never differentiated."""
    return Value(data)


# ---------------------------------------------------------------------------
# op implementations: each takes arrays (+ attrs) and returns (out, vjp) where
# vjp(g) gives one gradient per input (None if not needed).


def _shape_fail(op, *shapes):
    pretty = ", ".join(str(tuple(s)) for s in shapes)
    raise ShapeError(f"{op}: incompatible shapes {pretty}")


def _op_matmul(a, b):
    if b.ndim == 2 and a.ndim >= 1:
        if a.shape[-1] != b.shape[0]:
            _shape_fail("matmul", a.shape, b.shape)
        out = a @ b

        def vjp(g):
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
            return ga, gb

        return out, vjp
    if a.ndim >= 3 and a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2]:
        out = np.matmul(a, b)

        def vjp(g):
            return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)

        return out, vjp
    _shape_fail("matmul", a.shape, b.shape)


def _is_bias(a, b):
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def _reduce_bias(g, n):
    return g.reshape(-1, n).sum(axis=0)


def _op_add(a, b):
    if a.shape == b.shape:
        return a + b, lambda g: (g, g)
    if _is_bias(a, b):
        n = b.shape[0]
        return a + b, lambda g: (g, _reduce_bias(g, n))
    _shape_fail("add", a.shape, b.shape)


def _op_subtract(a, b):
    if a.shape == b.shape:
        return a - b, lambda g: (g, -g)
    if _is_bias(a, b):
        n = b.shape[0]
        return a - b, lambda g: (g, -_reduce_bias(g, n))
    _shape_fail("subtract", a.shape, b.shape)


def _op_multiply(a, b):
    if a.shape != b.shape:
        _shape_fail("multiply", a.shape, b.shape)
    return a * b, lambda g: (g * b, g * a)


def _op_divide(a, b):
    if a.shape != b.shape:
        _shape_fail("divide", a.shape, b.shape)
    out = a / b
    return out, lambda g: (g / b, -g * out / b)


def _op_scale(a, factor: float):
    return a * factor, lambda g: (g * factor,)


def _op_tanh(a):
    y = np.tanh(a)
    return y, lambda g: (g * (1.0 - y * y),)


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _op_sigmoid(a):
    y = _sigmoid(a)
    return y, lambda g: (g * y * (1.0 - y),)


def _op_relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


def _op_exp(a):
    y = np.exp(a)
    return y, lambda g: (g * y,)


def _op_log(a):
    return np.log(a), lambda g: (g / a,)


def _op_square(a):
    return a * a, lambda g: (2.0 * g * a,)


def _op_sin(a):
    return np.sin(a), lambda g: (g * np.cos(a),)


def _op_cos(a):
    return np.cos(a), lambda g: (-g * np.sin(a),)


def _op_softplus(a):
    return np.logaddexp(0.0, a), lambda g: (g * _sigmoid(a),)


_GELU_C = np.sqrt(2.0 / np.pi)


def _op_gelu(a):
    # tanh approximation, as in GPT-2
    a2 = a * a
    t = np.tanh(_GELU_C * a * (1.0 + 0.044715 * a2))
    out = 0.5 * a * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)

    return out, vjp


def _op_softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        # (diag(p) - p p^T) g, row by row
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return p, vjp


def _op_layernorm(a, eps: float = 1e-5):
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return y, vjp


def _op_sum(a, axis: int | None = None):
    if axis is None:
        shape = a.shape
        return np.asarray(a.sum()), lambda g: (np.full(shape, float(g)),)
    ax = axis % a.ndim
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return a.sum(axis=ax), vjp


def _op_mean(a, axis: int | None = None):
    if axis is None:
        shape, n = a.shape, a.size
        return np.asarray(a.mean()), lambda g: (np.full(shape, float(g) / n),)
    ax = axis % a.ndim
    shape, n = a.shape, a.shape[ax]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return a.mean(axis=ax), vjp


def _op_concatenate(*arrays, axis: int = -1):
    if not arrays:
        raise ShapeError("concatenate: no inputs")
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or arr.shape[:ax] + arr.shape[ax + 1 :] != ref.shape[:ax] + ref.shape[ax + 1 :]:
            _shape_fail("concatenate", *(x.shape for x in arrays))
    out = np.concatenate(arrays, axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in arrays])

    def vjp(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return out, vjp


def _op_stack(*arrays, axis: int = 0):
    if not arrays or any(x.shape != arrays[0].shape for x in arrays):
        _shape_fail("stack", *(x.shape for x in arrays))
    out = np.stack(arrays, axis=axis)
    ax = axis % out.ndim
    n = len(arrays)

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(n))

    return out, vjp


def _op_slice(a, index):
    parts = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts):
        # advanced indexing would need scatter-add; keep slices basic
        raise ShapeError(f"slice: only basic indexing is supported, got {index!r}")
    out = np.asarray(a[index])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return out.copy(), vjp


def _op_reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.reshape(shape)
    except ValueError:
        _shape_fail("reshape", a.shape, shape)
    src = a.shape
    return out, lambda g: (g.reshape(src),)


def _op_transpose(a, axes=None):
    if axes is None:
        if a.ndim < 2:
            _shape_fail("transpose", a.shape)
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        _shape_fail("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return np.transpose(a, axes).copy(), lambda g: (np.transpose(g, inv),)


def _op_clip(a, lo: float, hi: float):
    mask = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), lambda g: (g * mask,)


_OPS: dict[str, Callable] = {
    "matmul": _op_matmul,
    "add": _op_add,
    "subtract": _op_subtract,
    "multiply": _op_multiply,
    "divide": _op_divide,
    "scale": _op_scale,
    "tanh": _op_tanh,
    "sigmoid": _op_sigmoid,
    "relu": _op_relu,
    "exp": _op_exp,
    "log": _op_log,
    "square": _op_square,
    "sin": _op_sin,
    "cos": _op_cos,
    "softplus": _op_softplus,
    "gelu": _op_gelu,
    "softmax": _op_softmax,
    "layernorm": _op_layernorm,
    "sum": _op_sum,
    "mean": _op_mean,
    "concatenate": _op_concatenate,
    "stack": _op_stack,
    "slice": _op_slice,
    "reshape": _op_reshape,
    "transpose": _op_transpose,
    "clip": _op_clip,
}

_UNARY = {
    "tanh", "sigmoid", "relu", "exp", "log", "square", "sin", "cos",
    "softplus", "gelu", "softmax", "layernorm", "clip",
}

OP_KINDS = tuple(_OPS) + ("stop_gradient",)


class Parameter:
    """Persistent trainable array; bound to a tape as a leaf via ``Tape.param``."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str = ""):
        self.data = _as_f64(data).copy()
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    kind: str
    inputs: tuple  # node ids, None where the input was a constant
    vjp: Callable | None


class Tape:
    """Append-only record of operations.

    Create a fresh tape per optimization step; nodes are never reused.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        # id(param) -> (data, node id); holding Values here would make a tape <-> value cycle
        self._bound: dict[int, tuple] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> Value:
        """Register a differentiable input (parameter or variable)."""
        self.nodes.append(_Node("leaf", (), None))
        return Value(data, len(self.nodes) - 1, self)

    def constant(self, data) -> Value:
        return Value(data)

    def param(self, p: Parameter) -> Value:
        """Leaf for ``p`` on this tape; repeated calls return the same leaf."""
        bound = self._bound.get(id(p))
        if bound is None:
            v = self.leaf(p.data)
            self._bound[id(p)] = (v.data, v.node)
            return v
        return Value(bound[0], bound[1], self)

    def bind(self, p: Parameter, value: Value) -> None:
        """Use ``value`` (e.g. a slice of a flat leaf) wherever ``p`` is read on this tape."""
        if value.shape != p.shape:
            raise ShapeError(f"bind: {p.name or 'parameter'} has shape {p.shape}, value {value.shape}")
        self._bound[id(p)] = (value.data, value.node)

    def param_grads(self, grads: "Gradients", params) -> list[np.ndarray]:
        """Gradient arrays for ``params`` (zeros for parameters never bound)."""
        out = []
        for p in params:
            bound = self._bound.get(id(p))
            g = None if bound is None or bound[1] is None else dict.get(grads, bound[1])
            out.append(np.zeros(p.shape) if g is None else g)
        return out

    def apply(self, kind: str, *inputs: Value, **attrs) -> Value:
        if kind == "stop_gradient":
            (x,) = inputs
            return Value(x.data.copy())
        try:
            op = _OPS[kind]
        except KeyError:
            raise ValueError(f"unknown op kind {kind!r}") from None
        for x in inputs:
            if x.tape is not None and x.tape is not self:
                raise ValueError(f"{kind}: operand recorded on a different tape")
        out, vjp = op(*(x.data for x in inputs), **attrs)
        ids = tuple(x.node for x in inputs)
        if self is _CONST_TAPE or all(i is None for i in ids):
            return Value(out)
        self.nodes.append(_Node(kind, ids, vjp))
        return Value(out, len(self.nodes) - 1, self)

    # convenience wrappers for the n-ary ops
    def concatenate(self, values: Sequence[Value], axis: int = -1) -> Value:
        return self.apply("concatenate", *values, axis=axis)

    def stack(self, values: Sequence[Value], axis: int = 0) -> Value:
        return self.apply("stack", *values, axis=axis)

    def stop_gradient(self, x: Value) -> Value:
        return self.apply("stop_gradient", x)

    def backward(self, output: Value) -> "Gradients":
        return backward(self, output)


class _ConstTape(Tape):
    """Sink for operations on node-less values; records nothing."""

    def leaf(self, data) -> Value:
        raise RuntimeError("cannot create leaves without a tape")


_CONST_TAPE = _ConstTape()


class Gradients(dict):
    """Mapping node id -> gradient array, also indexable by Value."""

    def __getitem__(self, key):
        if isinstance(key, Value):
            return self.wrt(key)
        return dict.__getitem__(self, key)

    def wrt(self, value: Value) -> np.ndarray:
        if value.node is None or value.node not in self:
            return np.zeros(value.shape)
        return dict.__getitem__(self, value.node)


def forward(tape: Tape, kind: str, inputs: Iterable[Value], **attrs) -> Value:
    """Record one operation of the given kind on ``tape``."""
    return tape.apply(kind, *inputs, **attrs)


def backward(tape: Tape, output: Value) -> Gradients:
    """Reverse sweep from a scalar output; returns gradients of reachable nodes."""
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    if output.node is None or output.tape is not tape:
        return Gradients()
    nodes = tape.nodes
    grads: list = [None] * (output.node + 1)
    grads[output.node] = np.ones_like(output.data)
    for i in range(output.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        for j, gj in zip(node.inputs, node.vjp(g)):
            if j is None or gj is None:
                continue
            prev = grads[j]
            grads[j] = gj if prev is None else prev + gj
    result = Gradients()
    for i, g in enumerate(grads):
        if g is not None:
            result[i] = np.asarray(g)
    return result


def grad_check(
    f: Callable[[Tape, Value], Value],
    x,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps (tape, input value) to a scalar value. The error per coordinate
    is ``|analytic - numeric| / (|analytic| + 1e-8)``. ``coords`` restricts the
    check to a subset of flat coordinates (all by default).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _as_f64(x)
    tape = Tape()
    xv = tape.leaf(x.copy())
    out = f(tape, xv)
    analytic = backward(tape, out).wrt(xv).reshape(-1)

    def evaluate(z):
        t = Tape()
        return float(f(t, t.leaf(z)).data)

    idx = range(x.size) if coords is None else coords
    worst = 0.0
    flat = x.reshape(-1)
    for i in idx:
        zp = flat.copy()
        zm = flat.copy()
        zp[i] += eps
        zm[i] -= eps
        num = (evaluate(zp.reshape(x.shape)) - evaluate(zm.reshape(x.shape))) / (2 * eps)
        err = abs(analytic[i] - num) / (abs(analytic[i]) + 1e-8)
        worst = max(worst, err)
    return worst
