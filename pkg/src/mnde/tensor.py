"""Dense float64 tensors with tape-based reverse-mode differentiation.

Execution is eager: every operation computes its numpy result immediately
and, when an operand is attached to a live tape, records a node whose
backward closure pushes gradients to the operation's inputs.  A Tape holds
one forward pass and is consumed by exactly one backward pass; nodes are
appended in execution order, which is already a topological order, so the
backward sweep is a single reverse iteration.

Conventions enforced throughout:
  * all values are float64 and stored row-major,
  * any operation that produces NaN/Inf raises NumericsError,
  * elementwise broadcasting requires equal rank and size-1 axes (or a
    rank-0 scalar operand); gradients are summed back over broadcast axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericsError, ShapeError

Array = np.ndarray


def _as_f64(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # keep rank-0 scalars rank-0
    return arr


def _require_finite(arr: Array, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite result in {op}")


class Tensor:
    """A dense float64 array, optionally recorded on a Tape."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, values, tape: "Optional[Tape]" = None, nid: Optional[int] = None):
        self.data = _as_f64(values)
        _require_finite(self.data, "tensor construction")
        self.tape = tape
        self.nid = nid

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = " taped" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return reduce_mean(self, axis)


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Optional[Callable]):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Recording of one forward pass; consumed by one backward() call."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[tuple[int, tuple]] = []
        self._grads: Optional[list] = None
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, values) -> Tensor:
        """Register an input (parameter or data) as a gradient root."""
        nid = self._record("leaf", (), None)
        t = Tensor(values, self, nid)
        self._leaves.append((nid, t.data.shape))
        return t

    def _record(self, op: str, inputs: tuple, backward: Optional[Callable]) -> int:
        if self._consumed:
            raise NumericsError("tape already consumed by backward; build a new tape")
        nid = len(self._nodes)
        self._nodes.append(_Node(op, inputs, backward))
        return nid

    def backward(self, loss: Tensor) -> dict[int, Array]:
        """Reverse sweep from a scalar loss.

        Returns the gradient map for all leaves (zeros for leaves the loss
        does not depend on).  The tape is consumed afterwards.
        """
        if self._consumed:
            raise NumericsError("tape already consumed; one backward per tape")
        if loss.tape is not self:
            raise ShapeError("loss tensor does not belong to this tape")
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: list = [None] * len(self._nodes)
        grads[loss.nid] = np.ones(())
        for nid in range(loss.nid, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self._nodes[nid]
            if node.backward is None:
                continue
            for iid, gi in zip(node.inputs, node.backward(g)):
                if iid is None or gi is None:
                    continue
                # accumulation is out-of-place: backward closures may return
                # views into g, which must never be mutated
                grads[iid] = gi if grads[iid] is None else grads[iid] + gi
        self._grads = grads
        self._consumed = True
        out = {}
        for nid, shape in self._leaves:
            g = grads[nid]
            out[nid] = np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64).reshape(shape)
        return out

    def grad(self, t: Tensor) -> Array:
        if self._grads is None:
            raise NumericsError("backward has not run on this tape")
        if t.tape is not self:
            raise ShapeError("tensor does not belong to this tape")
        g = self._grads[t.nid]
        if g is None:
            return np.zeros(t.data.shape)
        return np.asarray(g, dtype=np.float64).reshape(t.data.shape)


@dataclass
class Parameter:
    """A named trainable array; the optimizer mutates value in place."""

    name: str
    value: Array
    grad: Array = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = _as_f64(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _merge_tapes(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ShapeError("operands were recorded on different tapes")
    return tape


def _broadcast_check(sa: tuple, sb: tuple, op: str) -> None:
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: rank mismatch between shapes {sa} and {sb}")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum a gradient down to the shape it was broadcast up from."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    axes = tuple(i for i, (dg, ds) in enumerate(zip(g.shape, shape)) if ds == 1 and dg != 1)
    return g.sum(axis=axes, keepdims=True)


def _unary(op: str, x: Tensor, data: Array, bwd: Callable[[Array], Array]) -> Tensor:
    out = Tensor(data, x.tape, None)
    if x.tape is not None:
        out.nid = x.tape._record(op, (x.nid,), lambda g: (bwd(g),))
    return out


def _binary(op: str, a, b, forward, da, db) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a.shape, b.shape, op)
    tape = _merge_tapes(a, b)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        data = forward(a.data, b.data)  # finiteness is checked by Tensor()
    out = Tensor(data, tape, None)
    if tape is not None:
        ad, bd = a.data, b.data
        sa, sb = a.shape, b.shape

        def bwd(g):
            return (_unbroadcast(da(g, ad, bd), sa), _unbroadcast(db(g, ad, bd), sb))

        out.nid = tape._record(op, (a.nid, b.nid), bwd)
    return out


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if np.any(b.data == 0.0):
        raise NumericsError("division by zero")
    return _binary("div", a, b, np.divide,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    tape = _merge_tapes(a, b)
    out = Tensor(a.data @ b.data, tape, None)
    if tape is not None:
        ad, bd = a.data, b.data

        def bwd(g):
            return (g @ bd.T, ad.T @ g)

        out.nid = tape._record("matmul", (a.nid, b.nid), bwd)
    return out


def bmm(a, b) -> Tensor:
    """Batched matmul: (B,m,k) @ (B,k,p) -> (B,m,p)."""
    a, b = _wrap(a), _wrap(b)
    if (a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    tape = _merge_tapes(a, b)
    out = Tensor(a.data @ b.data, tape, None)
    if tape is not None:
        ad, bd = a.data, b.data

        def bwd(g):
            return (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g)

        out.nid = tape._record("bmm", (a.nid, b.nid), bwd)
    return out


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0.0  # derivative at exactly 0 is defined as 0
    return _unary("relu", x, np.where(mask, x.data, 0.0), lambda g: g * mask)


def tanh(x) -> Tensor:
    x = _wrap(x)
    out_data = np.tanh(x.data)
    return _unary("tanh", x, out_data, lambda g: g * (1.0 - out_data * out_data))


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    if x.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    axis = _norm_axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return out_data * (g - (g * out_data).sum(axis=axis, keepdims=True))

    return _unary("softmax", x, out_data, bwd)


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _unary("transpose", x, x.data.transpose(axes), lambda g: g.transpose(inverse))


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape) or int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _unary("reshape", x, x.data.reshape(shape), lambda g: g.reshape(old))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    ndim = parts[0].ndim
    axis = _norm_axis(axis, ndim, "concat")
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: shapes {[p.shape for p in parts]} differ off axis {axis}")
    tape = _merge_tapes(*parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor(data, tape, None)
    if tape is not None:
        offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

        def bwd(g):
            return tuple(np.split(g, offsets, axis=axis))

        out.nid = tape._record("concat", tuple(p.nid for p in parts), bwd)
    return out


def slice_ranges(x, ranges: Sequence[tuple]) -> Tensor:
    """Slice with one (start, stop) pair per axis."""
    x = _wrap(x)
    if len(ranges) != x.ndim:
        raise ShapeError(f"slice: {len(ranges)} ranges for rank {x.ndim}")
    key = []
    for dim, (start, stop) in zip(x.shape, ranges):
        if not (0 <= start < stop <= dim):
            raise ShapeError(f"slice: range ({start}, {stop}) invalid for axis of size {dim}")
        key.append(slice(int(start), int(stop)))
    key = tuple(key)
    old = x.shape

    def bwd(g):
        full = np.zeros(old)
        full[key] = g
        return full

    return _unary("slice", x, x.data[key], bwd)


def reduce_sum(x, axis: Optional[int] = None) -> Tensor:
    x = _wrap(x)
    old = x.shape
    if axis is None:
        return _unary("reduce_sum", x, x.data.sum(), lambda g: np.broadcast_to(g, old))
    axis = _norm_axis(axis, x.ndim, "reduce_sum")
    return _unary("reduce_sum", x, x.data.sum(axis=axis),
                  lambda g: np.broadcast_to(np.expand_dims(g, axis), old))


def reduce_mean(x, axis: Optional[int] = None) -> Tensor:
    x = _wrap(x)
    old = x.shape
    if axis is None:
        count = x.data.size
        return _unary("reduce_mean", x, x.data.mean(), lambda g: np.broadcast_to(g / count, old))
    axis = _norm_axis(axis, x.ndim, "reduce_mean")
    count = old[axis]
    return _unary("reduce_mean", x, x.data.mean(axis=axis),
                  lambda g: np.broadcast_to(np.expand_dims(g / count, axis), old))


def gradcheck(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> float:
    """Compare tape gradients of a scalar function against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    x = np.array(x, dtype=np.float64)  # private copy; the loop perturbs it in place
    tape = Tape()
    xt = tape.leaf(x)
    loss = f(xt)
    if loss.data.shape != ():
        raise ShapeError("gradcheck needs a scalar-valued function")
    if loss.tape is None:
        analytic = np.zeros_like(x)  # loss never touched x: gradient is zero
    else:
        tape.backward(loss)
        analytic = tape.grad(xt)

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(Tensor(x)).data)
        flat[i] = orig - h
        down = float(f(Tensor(x)).data)
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(1.0, abs(a))
        if err > worst:
            worst = err
    return worst
