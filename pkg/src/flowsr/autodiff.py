"""Dense rank-4 tensors with a reverse-mode differentiation tape.

Values are plain numpy arrays of shape (n, c, h, w). A ``Variable`` wraps one
and, while a ``Tape`` is active, records the producing operation so that
``backward`` can replay the tape in strict reverse construction order.

A restricted op subset (conv2d, leaky_relu, add, mul, reduce_mean,
reduce_sum, square) expresses its backward rule in tape ops, so calling
``backward(..., create_graph=True)`` yields gradients that are themselves
live tape Variables and a second backward through them is legal. Requesting
create_graph through any other op raises ``SecondOrderError``.

Scalars are shape (1, 1, 1, 1); there is no rank-N generality here.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np

from .errors import NumericalError, SecondOrderError, ShapeError

DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations; construction order is topological.

    Tapes nest via ``with``; only the innermost records. Confined to a single
    thread for the duration of a training step.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.recording = True

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited out of order")

    @contextmanager
    def paused(self):
        prev = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = prev


@contextmanager
def _activated(tape: Tape):
    if active_tape() is tape:
        yield
    else:
        _TAPE_STACK.append(tape)
        try:
            yield
        finally:
            _TAPE_STACK.pop()


class Node:
    """One tape entry: op, input Variables, output Variable, saved context."""

    __slots__ = ("op", "inputs", "output", "ctx", "index", "tape")

    def __init__(self, op: "Op", inputs: tuple["Variable", ...],
                 output: "Variable", ctx: dict, index: int, tape: Tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.ctx = ctx
        self.index = index
        self.tape = tape


class Variable:
    """A tensor value plus optional tape linkage.

    ``grad`` is populated (as a raw array) by ``backward`` for leaf Variables;
    intermediate gradients are returned in the gradient map instead.
    """

    __slots__ = ("data", "requires_grad", "node", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"Variable requires rank-4 data, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar variable of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Variable":
        return Variable(self.data, requires_grad=False)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        tag = self.name or "var"
        return f"Variable({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


def as_variable(x, like: Variable | None = None) -> Variable:
    """Wrap scalars/arrays as constant Variables; pass Variables through.

    Python scalars adopt ``like``'s dtype so float32 graphs stay float32;
    arrays keep their own float dtype.
    """
    if isinstance(x, Variable):
        return x
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(like.dtype if like is not None else DEFAULT_DTYPE)
    elif arr.ndim == 0 and like is not None:
        arr = arr.astype(like.dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    return Variable(arr)


class Op:
    """Stateless operation descriptor. Subclasses fill in forward/backward.

    ``graph_ok`` marks the backward rule as built from tape ops, i.e. safe to
    record for a second-order pass.
    """

    name = "op"
    graph_ok = False

    def forward(self, ctx: dict, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, node: Node, grad_out: Variable) -> tuple[Optional[Variable], ...]:
        raise NotImplementedError


def apply_op(op: Op, *inputs, **params) -> Variable:
    """Run ``op`` forward, verify finiteness, and record it if a tape is live."""
    like = next((i for i in inputs if isinstance(i, Variable)), None)
    vars_in = tuple(as_variable(x, like=like) for x in inputs)
    ctx: dict = dict(params)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out_data = op.forward(ctx, *(v.data for v in vars_in), **params)
    if not np.all(np.isfinite(out_data)):
        raise NumericalError(f"non-finite values produced by op '{op.name}'")
    tape = active_tape()
    record = (tape is not None and tape.recording
              and any(v.requires_grad for v in vars_in))
    out = Variable(out_data, requires_grad=record)
    if record:
        node = Node(op, vars_in, out, ctx, len(tape.nodes), tape)
        tape.nodes.append(node)
        out.node = node
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def _unbroadcast(g: Variable, shape: tuple[int, ...]) -> Variable:
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return reduce_sum(g, axes) if axes else g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable")


class _Add(Op):
    name = "add"
    graph_ok = True

    def forward(self, ctx, a, b):
        _check_broadcast(a, b)
        return a + b

    def backward(self, node, g):
        a, b = node.inputs
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb


class _Sub(Op):
    name = "sub"

    def forward(self, ctx, a, b):
        _check_broadcast(a, b)
        return a - b

    def backward(self, node, g):
        a, b = node.inputs
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, -1.0), b.shape) if b.requires_grad else None
        return ga, gb


class _Mul(Op):
    name = "mul"
    graph_ok = True

    def forward(self, ctx, a, b):
        _check_broadcast(a, b)
        return a * b

    def backward(self, node, g):
        a, b = node.inputs
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb


class _Square(Op):
    name = "square"
    graph_ok = True

    def forward(self, ctx, a):
        return np.square(a)

    def backward(self, node, g):
        (a,) = node.inputs
        return (mul(g, mul(a, 2.0)),)


class _Abs(Op):
    name = "abs"

    def forward(self, ctx, a):
        ctx["sign"] = np.sign(a)
        return np.abs(a)

    def backward(self, node, g):
        return (mul(g, Variable(node.ctx["sign"])),)


class _Tanh(Op):
    name = "tanh"

    def forward(self, ctx, a):
        y = np.tanh(a)
        ctx["dydx"] = 1.0 - np.square(y)
        return y

    def backward(self, node, g):
        return (mul(g, Variable(node.ctx["dydx"])),)


class _Sigmoid(Op):
    name = "sigmoid"

    def forward(self, ctx, a):
        y = np.empty_like(a)
        pos = a >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        y[~pos] = ea / (1.0 + ea)
        ctx["dydx"] = y * (1.0 - y)
        return y

    def backward(self, node, g):
        return (mul(g, Variable(node.ctx["dydx"])),)


class _Log(Op):
    """log with the argument clamped below at ``floor`` (gradient 0 there)."""

    name = "log"

    def forward(self, ctx, a, *, floor):
        clamped = np.maximum(a, floor)
        ctx["dydx"] = np.where(a > floor, 1.0 / clamped, 0.0).astype(a.dtype)
        return np.log(clamped)

    def backward(self, node, g):
        return (mul(g, Variable(node.ctx["dydx"])),)


class _Rsqrt(Op):
    name = "rsqrt"

    def forward(self, ctx, a):
        if np.any(a <= 0):
            raise NumericalError("rsqrt domain error: non-positive input")
        y = 1.0 / np.sqrt(a)
        ctx["dydx"] = -0.5 * y ** 3
        return y

    def backward(self, node, g):
        return (mul(g, Variable(node.ctx["dydx"])),)


class _Crop(Op):
    """Spatial slice [h0:h1, w0:w1]; backward zero-pads back."""

    name = "crop"

    def forward(self, ctx, a, *, h0, h1, w0, w1):
        ctx["in_shape"] = a.shape
        return np.ascontiguousarray(a[:, :, h0:h1, w0:w1])

    def backward(self, node, g):
        h0, h1, w0, w1 = (node.ctx[k] for k in ("h0", "h1", "w0", "w1"))
        full = np.zeros(node.ctx["in_shape"], dtype=g.dtype)
        full[:, :, h0:h1, w0:w1] = g.data
        return (Variable(full),)


class _BroadcastTo(Op):
    """Internal: explicit broadcast used by reduce backward rules."""

    name = "broadcast_to"
    graph_ok = True

    def forward(self, ctx, a, *, shape):
        ctx["in_shape"] = a.shape
        return np.broadcast_to(a, shape).copy()

    def backward(self, node, g):
        return (_unbroadcast(g, node.ctx["in_shape"]),)


class _Reduce(Op):
    graph_ok = True

    def __init__(self, mean: bool):
        self.mean = mean
        self.name = "reduce_mean" if mean else "reduce_sum"

    def forward(self, ctx, a, *, axes):
        ctx["in_shape"] = a.shape
        fn = np.mean if self.mean else np.sum
        return fn(a, axis=axes, keepdims=True, dtype=a.dtype)

    def backward(self, node, g):
        in_shape = node.ctx["in_shape"]
        if self.mean:
            count = 1
            for ax in node.ctx["axes"]:
                count *= in_shape[ax]
            g = mul(g, 1.0 / count)
        return (broadcast_to(g, in_shape),)


_ADD = _Add()
_SUB = _Sub()
_MUL = _Mul()
_SQUARE = _Square()
_ABS = _Abs()
_TANH = _Tanh()
_SIGMOID = _Sigmoid()
_LOG = _Log()
_RSQRT = _Rsqrt()
_CROP = _Crop()
_BCAST = _BroadcastTo()
_MEAN = _Reduce(mean=True)
_SUM = _Reduce(mean=False)


def add(a, b) -> Variable:
    return apply_op(_ADD, a, b)


def sub(a, b) -> Variable:
    return apply_op(_SUB, a, b)


def mul(a, b) -> Variable:
    return apply_op(_MUL, a, b)


def square(a) -> Variable:
    return apply_op(_SQUARE, a)


def abs_(a) -> Variable:
    return apply_op(_ABS, a)


def tanh(a) -> Variable:
    return apply_op(_TANH, a)


def sigmoid(a) -> Variable:
    return apply_op(_SIGMOID, a)


def log(a, floor: float = 1e-8) -> Variable:
    return apply_op(_LOG, a, floor=floor)


def rsqrt(a) -> Variable:
    return apply_op(_RSQRT, a)


def crop(a, h0: int, h1: int, w0: int, w1: int) -> Variable:
    return apply_op(_CROP, a, h0=h0, h1=h1, w0=w0, w1=w1)


def broadcast_to(a, shape) -> Variable:
    return apply_op(_BCAST, a, shape=tuple(shape))


def _normalize_axes(axes) -> tuple[int, ...]:
    if axes is None:
        return (0, 1, 2, 3)
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(set(int(ax) for ax in axes)))
    if any(ax < 0 or ax > 3 for ax in axes) or not axes:
        raise ShapeError(f"invalid reduction axes {axes}")
    return axes


def reduce_mean(a, axes=None) -> Variable:
    return apply_op(_MEAN, a, axes=_normalize_axes(axes))


def reduce_sum(a, axes=None) -> Variable:
    return apply_op(_SUM, a, axes=_normalize_axes(axes))


# ---------------------------------------------------------------------------
# backward


def _zeros_like_var(v: Variable) -> Variable:
    return Variable(np.zeros(v.shape, dtype=v.dtype))


def backward(loss: Variable, wrt: Optional[Sequence[Variable]] = None,
             create_graph: bool = False) -> dict[Variable, Variable]:
    """Reverse sweep from a scalar loss.

    Returns a map Variable -> gradient Variable covering ``wrt`` (or, when
    ``wrt`` is None, every requires-grad leaf that received a gradient).
    Disconnected ``wrt`` entries get explicit zeros. With ``create_graph`` the
    returned gradients are recorded on the same tape, so a second backward
    through them is legal for the supported op subset.

    Leaf Variables additionally get ``.grad`` set (raw array) for convenience.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    wrt_list = list(wrt) if wrt is not None else None
    grads: dict[Variable, Variable] = {}

    if loss.node is None:
        # Constant loss: gradients are identically zero.
        result = {v: _zeros_like_var(v) for v in (wrt_list or [])}
        for v, g in result.items():
            v.grad = g.data
        return result

    tape = loss.node.tape
    seed = Variable(np.ones((1, 1, 1, 1), dtype=loss.dtype))
    grads[loss] = seed

    with _activated(tape):
        runner = tape.paused() if not create_graph else _noop_ctx()
        with runner:
            for idx in range(loss.node.index, -1, -1):
                node = tape.nodes[idx]
                g_out = grads.pop(node.output, None)
                if g_out is None:
                    continue
                if create_graph and not node.op.graph_ok:
                    raise SecondOrderError(
                        f"create_graph backward through unsupported op '{node.op.name}'")
                in_grads = node.op.backward(node, g_out)
                for inp, gi in zip(node.inputs, in_grads):
                    if gi is None or not inp.requires_grad:
                        continue
                    prev = grads.get(inp)
                    grads[inp] = gi if prev is None else add(prev, gi)

    if wrt_list is not None:
        result = {v: grads.get(v, _zeros_like_var(v)) for v in wrt_list}
    else:
        result = {v: g for v, g in grads.items() if v.node is None and v.requires_grad}
    for v, g in result.items():
        if v.node is None:
            v.grad = g.data
    return result


@contextmanager
def _noop_ctx():
    yield
