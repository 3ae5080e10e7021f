"""Tape-based reverse-mode differentiation over dense float64 arrays.

A ``Tape`` records every primitive op (matmul, elementwise arithmetic,
activations, reductions, shape ops) applied to tensors bound to it, in
execution order.  ``backward`` replays the record in reverse and returns
gradients for named leaf parameters.  Tensors without a tape are constants:
ops on them execute as plain numpy and record nothing, which is how teacher
forward passes and stop-gradient targets stay out of the graph.

Conventions baked in here:
  * float64 only; checking is cheap to keep strict.
  * subgradient of |x| and relu at 0 is 0.
  * a tape instance is single-threaded; independent tapes are independent.

With ``check_finite=True`` every op output and every backward contribution is
scanned for NaN/Inf (slow; meant for tests and gradient verification).  The
hot adaptation path runs with it off and validates loss + parameter gradients
instead.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class NumericsError(Exception):
    """Non-finite value or malformed use of the tape."""


class _Op:
    __slots__ = ("name", "out_id", "inputs")

    def __init__(self, name: str, out_id: int, inputs):
        self.name = name
        self.out_id = out_id
        # inputs: tuple of (input_node_id, vjp callable)
        self.inputs = inputs


class Tape:
    """Ordered op record; topological by construction."""

    __slots__ = ("ops", "n_nodes", "check_finite", "_leaf_ids", "_leaf_shapes")

    def __init__(self, check_finite: bool = False):
        self.ops: list[_Op] = []
        self.n_nodes = 0
        self.check_finite = check_finite
        self._leaf_ids: dict[str, int] = {}
        self._leaf_shapes: dict[str, tuple] = {}

    def _new_id(self) -> int:
        i = self.n_nodes
        self.n_nodes += 1
        return i

    def leaf(self, data: np.ndarray, name: str) -> "Tensor":
        """Register a named differentiable leaf (model parameter)."""
        if name in self._leaf_ids:
            raise NumericsError(f"duplicate leaf name {name!r}")
        arr = np.asarray(data, dtype=np.float64)
        t = Tensor(arr, tape=self, node_id=self._new_id())
        self._leaf_ids[name] = t.node_id
        self._leaf_shapes[name] = arr.shape
        return t

    def record(self, name: str, out: np.ndarray, inputs) -> "Tensor":
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NumericsError(f"non-finite output of op {name!r} (op index {len(self.ops)})")
        t = Tensor(out, tape=self, node_id=self._new_id())
        self.ops.append(_Op(name, t.node_id, inputs))
        return t


class Tensor:
    """float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional[Tape] = None, node_id: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        kind = "const" if self.tape is None else f"node{self.node_id}"
        return f"Tensor({kind}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Optional[Tape]:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise NumericsError("tensors from different tapes in one op")
            tape = t.tape
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(name: str, a, b, fwd, vjp_a: Callable, vjp_b: Callable) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = fwd(a.data, b.data)
    if tape is None:
        return Tensor(out)
    inputs = []
    if a.tape is not None:
        inputs.append((a.node_id, vjp_a(a.data, b.data)))
    if b.tape is not None:
        inputs.append((b.node_id, vjp_b(a.data, b.data)))
    return tape.record(name, out, tuple(inputs))


def add(a, b) -> Tensor:
    return _binary(
        "add", a, b, lambda x, y: x + y,
        lambda x, y: lambda g: _unbroadcast(g, x.shape),
        lambda x, y: lambda g: _unbroadcast(g, y.shape),
    )


def sub(a, b) -> Tensor:
    return _binary(
        "sub", a, b, lambda x, y: x - y,
        lambda x, y: lambda g: _unbroadcast(g, x.shape),
        lambda x, y: lambda g: _unbroadcast(-g, y.shape),
    )


def mul(a, b) -> Tensor:
    return _binary(
        "mul", a, b, lambda x, y: x * y,
        lambda x, y: lambda g: _unbroadcast(g * y, x.shape),
        lambda x, y: lambda g: _unbroadcast(g * x, y.shape),
    )


def div(a, b) -> Tensor:
    return _binary(
        "div", a, b, lambda x, y: x / y,
        lambda x, y: lambda g: _unbroadcast(g / y, x.shape),
        lambda x, y: lambda g: _unbroadcast(-g * x / (y * y), y.shape),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    if a.tape is None:
        return Tensor(-a.data)
    return a.tape.record("neg", -a.data, ((a.node_id, lambda g: -g),))


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = np.matmul(a.data, b.data)
    if tape is None:
        return Tensor(out)
    inputs = []
    if a.tape is not None:
        bd = b.data

        def vjp_a(g, bd=bd, sh=a.data.shape):
            return _unbroadcast(np.matmul(g, _swap(bd)), sh)

        inputs.append((a.node_id, vjp_a))
    if b.tape is not None:
        ad = a.data

        def vjp_b(g, ad=ad, sh=b.data.shape):
            return _unbroadcast(np.matmul(_swap(ad), g), sh)

        inputs.append((b.node_id, vjp_b))
    return tape.record("matmul", out, tuple(inputs))


def _unary(name: str, a, out: np.ndarray, vjp) -> Tensor:
    if a.tape is None:
        return Tensor(out)
    return a.tape.record(name, out, ((a.node_id, vjp),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _unary("relu", a, out, lambda g, m=mask: g * m)


def leaky_relu(a, slope: float) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0.0, 1.0, slope)
    return _unary("leaky_relu", a, a.data * factor, lambda g, f=factor: g * f)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # exp overflow saturates to a finite 0
        out = 1.0 / (1.0 + np.exp(-a.data))
    return _unary("sigmoid", a, out, lambda g, s=out: g * (s * (1.0 - s)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _unary("tanh", a, out, lambda g, t=out: g * (1.0 - t * t))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # inf is surfaced by the finite check
        out = np.exp(a.data)
    return _unary("exp", a, out, lambda g, e=out: g * e)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)  # sign(0) == 0: |x| subgradient at 0 is 0
    return _unary("abs", a, np.abs(a.data), lambda g, s=sign: g * s)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _unary("square", a, a.data * a.data, lambda g, x=a.data: g * (2.0 * x))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g, r=out):
        with np.errstate(divide="ignore"):  # inf at 0 is surfaced by the finite check
            return g * (0.5 / r)

    return _unary("sqrt", a, out, vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, shape=a.data.shape, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _unary("sum", a, out, vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]

    def vjp(g, shape=a.data.shape, axis=axis, keepdims=keepdims, count=count):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, shape)

    return _unary("mean", a, out, vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _unary("reshape", a, out, lambda g, s=a.data.shape: g.reshape(s))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))
    return _unary("transpose", a, out, lambda g, p=inv: np.transpose(g, p))


def narrow(a, start: int, size: int, axis: int = -1) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    out = a.data[idx]

    def vjp(g, shape=a.data.shape, idx=idx):
        full = np.zeros(shape)
        full[idx] = g
        return full

    return _unary("narrow", a, out, vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    tape = _tape_of(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    if tape is None:
        return Tensor(out)
    inputs = []
    offset = 0
    for t in tensors:
        size = t.data.shape[axis]
        if t.tape is not None:
            def vjp(g, o=offset, s=size, axis=axis, nd=out.ndim):
                idx = [slice(None)] * nd
                idx[axis] = slice(o, o + s)
                return g[tuple(idx)]

            inputs.append((t.node_id, vjp))
        offset += size
    return tape.record("concat", out, tuple(inputs))


def stop_gradient(a) -> Tensor:
    """Value passes through; gradient does not."""
    a = as_tensor(a)
    return Tensor(a.data)


def softmax_masked(scores: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Softmax over `axis` restricted to positions where mask == 1.

    The max-shift stabilizer is taken from the forward values as a constant,
    which leaves the gradient exact.  Rows with an all-zero mask are the
    caller's bug; they divide by zero loudly.
    """
    shift = np.max(scores.data, axis=axis, keepdims=True)
    e = mul(exp(sub(scores, shift)), mask)
    return div(e, tsum(e, axis=axis, keepdims=True))


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every named leaf. Tape is unchanged."""
    if loss.tape is not tape:
        raise NumericsError("loss does not belong to this tape")
    if loss.data.size != 1:
        raise NumericsError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: list[Optional[np.ndarray]] = [None] * tape.n_nodes
    grads[loss.node_id] = np.ones_like(loss.data)
    check = tape.check_finite
    for op_index in range(len(tape.ops) - 1, -1, -1):
        op = tape.ops[op_index]
        g = grads[op.out_id]
        if g is None:
            continue
        for in_id, vjp in op.inputs:
            contrib = vjp(g)
            if check and not np.all(np.isfinite(contrib)):
                raise NumericsError(
                    f"non-finite gradient in reverse sweep at op index {op_index} ({op.name})"
                )
            old = grads[in_id]
            grads[in_id] = contrib if old is None else old + contrib
    out: dict[str, np.ndarray] = {}
    for name, node_id in tape._leaf_ids.items():
        g = grads[node_id]
        out[name] = np.zeros(tape._leaf_shapes[name]) if g is None else np.asarray(g)
    return out
