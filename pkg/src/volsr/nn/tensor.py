"""Reverse-mode differentiable tensors over float64 numpy arrays.

Only the operations the networks and losses need are provided. Every op
records a tape node holding its inputs and a closure that maps the output
gradient to input gradients; :func:`backward` walks the tape in reverse
topological order.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class AutodiffError(ValueError):
    """Shape mismatch or misuse of an autodiff operation."""


_grad_enabled: bool = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class TapeNode:
    """Provenance record: input tensors and the gradient closure."""

    __slots__ = ("inputs", "backward_fn")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    """N-D float64 array with an optional gradient buffer and tape node.

    ``grad`` reads as zeros until something has been accumulated into it.
    Leaves are constructed with ``requires_grad=True``; results of ops on
    them propagate the flag and carry a tape node while grad mode is on.
    """

    __slots__ = ("data", "requires_grad", "tape_node", "_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape_node: TapeNode | None = None
        self._grad: np.ndarray | None = None

    @property
    def grad(self) -> np.ndarray | None:
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor(self.data)
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are folded as constants.
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

    def __neg__(self):
        return neg(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_node = TapeNode(inputs, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t._grad is None:
        t._grad = np.zeros_like(t.data)
    t._grad += g


def backward(loss: Tensor) -> None:
    """Populate gradients of everything ``loss`` depends on.

    ``loss`` must hold a single element. Gradients accumulate, so leaves
    must be zeroed (or freshly created) between independent backward passes.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss does not require grad; nothing to backpropagate")

    # Iterative post-order over the tape (graphs can be deep).
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.tape_node is not None:
            for inp in node.tape_node.inputs:
                if id(inp) not in seen and inp.tape_node is not None:
                    stack.append((inp, False))
                elif id(inp) not in seen and inp.requires_grad:
                    seen.add(id(inp))
                    topo.append(inp)

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node.tape_node is None or node._grad is None:
            continue
        grads = node.tape_node.backward_fn(node._grad)
        for inp, g in zip(node.tape_node.inputs, grads):
            if g is not None and inp.requires_grad:
                _accumulate(inp, g)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise AutodiffError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _make(a.data - c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        c = float(a)
        return _make(c - b.data, (b,), lambda g: (-g,))
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    # Subgradient 0 at exactly 0.
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def moveaxis(a: Tensor, source: int, destination: int) -> Tensor:
    return _make(
        np.ascontiguousarray(np.moveaxis(a.data, source, destination)),
        (a,),
        lambda g: (np.moveaxis(g, destination, source),),
    )


def slice_axis(a: Tensor, axis: int, start=None, stop=None, step=None) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop, step)
    index = tuple(index)
    shape = a.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[index] = g
        return (gx,)

    return _make(a.data[index].copy(), (a,), bwd)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (dim 1); gradient splits back."""
    xs = list(xs)
    if not xs:
        raise AutodiffError("concat_channels: empty input list")
    first = xs[0]
    for t in xs[1:]:
        if t.ndim != first.ndim or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise AutodiffError(
                f"concat_channels: incompatible shapes {[x.shape for x in xs]}"
            )
    counts = [t.shape[1] for t in xs]
    offsets = np.cumsum([0] + counts)

    def bwd(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([t.data for t in xs], axis=1), xs, bwd)


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a raw array."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    slope = float(slope)
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_array(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * sigmoid_array(a.data),))
