"""Dense 5-axis tensors with reverse-mode automatic differentiation.

Every value in the network is a ``Tensor5``: a (batch, channel, depth, height,
width) float array.  Operations executed inside a ``GradTape`` context record
nodes in execution order; ``GradTape.backward`` walks the record in reverse and
accumulates gradients into every leaf tensor that requires them.  Production
code runs float32; float64 is admitted so numerical oracles (finite
differences) can probe the same operations at higher precision.
"""

from __future__ import annotations

import itertools
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatchError(ValueError):
    """Binary op received incompatible shapes; carries both for inspection."""

    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: shape mismatch {self.shape_a} vs {self.shape_b}")


class Tensor5:
    """A dense 5-axis array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 5:
            raise ValueError(f"Tensor5 needs 5 axes, got shape {arr.shape}")
        if any(e < 1 for e in arr.shape):
            raise ValueError(f"Tensor5 extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def is_scalar_shaped(self) -> bool:
        return all(e == 1 for e in self.data.shape)

    def item(self) -> float:
        if not self.is_scalar_shaped():
            raise ValueError(f"item() on non-scalar shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor5":
        return Tensor5(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = (self.grad + g).astype(self.data.dtype, copy=False)

    def __repr__(self):
        return f"Tensor5(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and scalar-shaped tensors broadcast, nothing else
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def scalar_tensor(value: float, dtype=np.float32, requires_grad: bool = False) -> Tensor5:
    return Tensor5(np.full((1, 1, 1, 1, 1), value, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


class ParamGroup(Enum):
    """Freezable parameter groups; the training schedule unfreezes them stage-wise."""

    ENCODER_DECODER = "ENCODER_DECODER"
    FABRIC = "FABRIC"
    WRS_FABRIC = "WRS_FABRIC"
    WRS_OUTER = "WRS_OUTER"
    HEAD = "HEAD"


_param_ids = itertools.count()


class Parameter:
    """A named, grouped, trainable tensor registered with a network."""

    __slots__ = ("pid", "name", "value", "trainable", "_group")

    def __init__(self, name: str, value: Tensor5, group: ParamGroup, trainable: bool = True):
        self.pid = next(_param_ids)
        self.name = name
        self.value = value
        self.trainable = trainable
        self._group = group
        value.requires_grad = trainable

    @property
    def group(self) -> ParamGroup:
        return self._group

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, group={self.group.name})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor5, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_ACTIVE_TAPE: Optional["GradTape"] = None


class GradTape:
    """Ordered record of executed operations for one forward pass.

    A tape instance is confined to a single thread; nesting is not supported.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a GradTape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Tensor5):
        """Propagate d(loss)=1 through the record; leaves accumulate into .grad."""
        if not isinstance(loss, Tensor5) or not loss.is_scalar_shaped():
            shape = getattr(loss, "shape", None)
            raise ValueError(f"backward needs a scalar tensor, got shape {shape}")
        if not loss.requires_grad:
            raise ValueError("loss is not connected to this tape (requires_grad is False)")
        pending: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        produced = {id(node.out) for node in self.nodes}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        # anything left pending is a leaf (inputs, parameters)
        leaves: dict[int, Tensor5] = {}
        for node in self.nodes:
            for parent in node.parents:
                if id(parent) not in produced:
                    leaves[id(parent)] = parent
        if id(loss) not in produced:
            leaves[id(loss)] = loss
        for key, g in pending.items():
            t = leaves.get(key)
            if t is not None:
                t.accumulate_grad(g)


def _record(out: Tensor5, parents: Sequence[Tensor5], backward_fn: Callable):
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def _check_same_shape(op: str, a: Tensor5, b: Tensor5):
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


def _as_operand(op: str, a: Tensor5, b):
    """Second operands may be a same-shape tensor, a scalar-shaped tensor, or a number."""
    if isinstance(b, Tensor5):
        if b.shape != a.shape and not b.is_scalar_shaped() and not a.is_scalar_shaped():
            raise ShapeMismatchError(op, a.shape, b.shape)
        return b
    return scalar_tensor(float(b), dtype=a.data.dtype)


def _reduce_to_shape(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    # scalar-shaped operand: fan-in reduces over everything
    return g.sum(dtype=g.dtype).reshape(shape)


def add(a: Tensor5, b) -> Tensor5:
    b = _as_operand("add", a, b)
    out = Tensor5(a.data + b.data, dtype=np.result_type(a.data, b.data))

    def bwd(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a: Tensor5, b) -> Tensor5:
    b = _as_operand("sub", a, b)
    out = Tensor5(a.data - b.data, dtype=np.result_type(a.data, b.data))

    def bwd(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor5, b) -> Tensor5:
    b = _as_operand("mul", a, b)
    out = Tensor5(a.data * b.data, dtype=np.result_type(a.data, b.data))
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _reduce_to_shape(g * b_data, a.shape), _reduce_to_shape(g * a_data, b.shape)

    return _record(out, (a, b), bwd)


def scale(a: Tensor5, s: float) -> Tensor5:
    s = float(s)
    out = Tensor5(a.data * s, dtype=a.data.dtype)

    def bwd(g):
        return (g * s,)

    return _record(out, (a,), bwd)


def sigmoid(a: Tensor5) -> Tensor5:
    # split by sign for stability at large |x|
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor5(y, dtype=x.dtype)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record(out, (a,), bwd)


def relu(a: Tensor5) -> Tensor5:
    out = Tensor5(np.maximum(a.data, 0), dtype=a.data.dtype)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _record(out, (a,), bwd)


def exp(a: Tensor5) -> Tensor5:
    y = np.exp(a.data)
    out = Tensor5(y, dtype=a.data.dtype)

    def bwd(g):
        return (g * y,)

    return _record(out, (a,), bwd)


def log(a: Tensor5) -> Tensor5:
    out = Tensor5(np.log(a.data), dtype=a.data.dtype)
    x = a.data

    def bwd(g):
        return (g / x,)

    return _record(out, (a,), bwd)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, a: Tensor5, b=None) -> Tensor5:
    """Dispatch by name over the elementwise op set."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ValueError(f"{op} needs a second operand")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op} is unary")
    return fn(a)


def tsum(a: Tensor5) -> Tensor5:
    """Sum of every element, as a scalar tensor."""
    out = scalar_tensor(0.0, dtype=a.data.dtype)
    out.data[...] = a.data.sum(dtype=a.data.dtype)
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g.reshape(()), shape).astype(g.dtype),)

    return _record(out, (a,), bwd)


def concat_channels(tensors: Sequence[Tensor5]) -> Tensor5:
    """Concatenate along the channel axis; all other extents must agree."""
    first = tensors[0]
    for t in tensors[1:]:
        if (t.shape[0],) + t.shape[2:] != (first.shape[0],) + first.shape[2:]:
            raise ShapeMismatchError("concat_channels", first.shape, t.shape)
    out = Tensor5(np.concatenate([t.data for t in tensors], axis=1), dtype=first.data.dtype)
    splits = [t.shape[1] for t in tensors]

    def bwd(g):
        grads = []
        start = 0
        for c in splits:
            grads.append(g[:, start:start + c])
            start += c
        return tuple(grads)

    return _record(out, tuple(tensors), bwd)


def softmax_channels(x: Tensor5) -> Tensor5:
    """Per-voxel softmax over the channel axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor5(p, dtype=x.data.dtype)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (x,), bwd)


def _validate_one_hot(target: Tensor5):
    t = target.data
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("cross_entropy target must be one-hot (entries 0 or 1)")
    sums = t.sum(axis=1)
    if not np.all(sums == 1):
        raise ValueError("cross_entropy target must be one-hot (channel sums must be 1)")


def cross_entropy(prob: Tensor5, target: Tensor5, eps: float = 1e-7) -> Tensor5:
    """Mean over voxels of -sum_c target*log(prob + eps)."""
    _check_same_shape("cross_entropy", prob, target)
    _validate_one_hot(target)
    p = prob.data
    t = target.data
    n_vox = p.shape[0] * p.shape[2] * p.shape[3] * p.shape[4]
    # clamp the log argument at 1 so a perfect prediction costs exactly 0
    val = -(t * np.log(np.minimum(p + eps, 1.0))).sum(dtype=np.float64) / n_vox
    out = scalar_tensor(float(val), dtype=p.dtype)

    def bwd(g):
        gs = g.reshape(())
        return (-(t / (p + eps)) * (gs / n_vox), None)

    return _record(out, (prob, target), bwd)
