"""Dense float64 tensors with an explicit reverse-mode gradient tape.

There is no global autograd state. A :class:`GradTape` is created per
training step, parameters are registered on it with :meth:`GradTape.watch`,
and every op whose inputs touch that tape appends a node to it. Ops on
untracked tensors just compute values.

    tape = GradTape()
    w = tape.watch(np.ones(3), name="w")
    loss = tsum(w * w)
    grads = tape.backward(loss)        # {"w": array([2., 2., 2.])}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable float64 array, optionally tracked by a :class:`GradTape`."""

    __slots__ = ("data", "tape", "grad_id")

    def __init__(self, data, *, _tape: "GradTape | None" = None, _grad_id: int | None = None, _copy: bool = True):
        arr = np.array(data, dtype=np.float64) if _copy else data
        arr.flags.writeable = False
        self.data = arr
        self.tape = _tape
        self.grad_id = _grad_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tracked = "" if self.tape is None else f", grad_id={self.grad_id}"
        return f"Tensor(shape={self.shape}{tracked})"

    def __len__(self) -> int:
        return self.shape[0]

    __array_priority__ = 100

    def __matmul__(self, other):
        return matmul(self, other)

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
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _wrap(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), _copy=False)


@dataclass
class _Node:
    parents: tuple[int | None, ...]
    backward: BackwardFn | None
    shape: tuple[int, ...]


@dataclass
class GradTape:
    """Ordered record of tracked ops; single use, single thread.

    Nodes are appended in creation order, so parents always precede
    children. :meth:`backward` may be called once; a second call raises
    :class:`ContractError`.
    """

    nodes: list[_Node] = field(default_factory=list)
    leaf_names: dict[int, str] = field(default_factory=dict)
    _grads: dict[int, np.ndarray] | None = None

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register a leaf (a parameter or any input to differentiate by)."""
        if self._grads is not None:
            raise ContractError("cannot watch new leaves on a tape that has already run backward")
        data = value.data if isinstance(value, Tensor) else value
        arr = np.array(data, dtype=np.float64)
        gid = len(self.nodes)
        self.nodes.append(_Node((), None, arr.shape))
        self.leaf_names[gid] = name if name is not None else f"leaf{gid}"
        return Tensor(arr, _tape=self, _grad_id=gid, _copy=False)

    def record(self, out: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        gid = len(self.nodes)
        parents = tuple(t.grad_id if t.tape is self else None for t in inputs)
        self.nodes.append(_Node(parents, backward, out.shape))
        return Tensor(np.asarray(out, dtype=np.float64), _tape=self, _grad_id=gid, _copy=False)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Propagate d(loss)/d(leaf) for every watched leaf.

        Returns a mapping leaf name -> gradient; leaves the loss does not
        depend on get zeros.
        """
        if self._grads is not None:
            raise ContractError("backward() already ran on this tape; create a new GradTape per step")
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.grad_id] = np.ones(loss.shape)
        for gid in range(loss.grad_id, -1, -1):
            node = self.nodes[gid]
            g = grads[gid]
            if g is None or node.backward is None:
                continue
            parent_grads = node.backward(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
            if gid not in self.leaf_names:
                grads[gid] = None

        self._grads = {}
        for gid in self.leaf_names:
            g = grads[gid]
            self._grads[gid] = np.zeros(self.nodes[gid].shape) if g is None else np.asarray(g, dtype=np.float64)
        # drop closures so intermediate activations can be freed
        for node in self.nodes:
            node.backward = None
        return {self.leaf_names[gid]: g for gid, g in self._grads.items()}

    def gradient(self, leaf: Tensor) -> np.ndarray:
        if self._grads is None:
            raise ContractError("gradient() requested before backward()")
        if leaf.tape is not self or leaf.grad_id not in self._grads:
            raise ContractError("tensor is not a leaf of this tape")
        return self._grads[leaf.grad_id]


def record_op(out: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``out`` as the result of an op on ``inputs``.

    ``backward`` maps the output gradient to one gradient per input (``None``
    for inputs that need none). It is only kept if some input is tracked.
    """
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError("inputs are tracked by different tapes")
    if tape is None:
        return _wrap(out)
    return tape.record(out, inputs, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return record_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return record_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return record_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return record_op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return record_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # two-branch form stays finite for large |x|
    x = as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    """Clamp values; the gradient is zero where clamping was active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return record_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op(np.asarray(y), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None
    return record_op(y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    y = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return record_op(y, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    y = x.data[index]

    def backward(g):
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return (out,)

    return record_op(np.array(y), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis``; all other extents must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    y = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return record_op(y, tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra and softmax
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b``.

    Leading (batch) axes follow numpy matmul rules; the common case of a
    batched ``a`` times a shared 2-D ``b`` is reduced with one BLAS call in
    the backward pass.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record_op(y, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax: empty axis {axis} in shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return record_op(y, (x,), backward)
