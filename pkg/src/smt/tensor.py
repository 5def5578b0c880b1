"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded together with
their backward rules; :func:`backward` walks the record in reverse once.

    >>> w = Tensor([[1.0, 1.0], [1.0, 1.0]], requires_grad=True)
    >>> x = Tensor([[2.0], [3.0]])
    >>> with Tape() as tape:
    ...     loss = sum_all(matmul(w, x))
    >>> backward(tape, loss)
    >>> w.grad.tolist()
    [[2.0, 3.0], [2.0, 3.0]]
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeStateError(RuntimeError):
    """A tape was used after its backward pass already ran."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of operations for one forward/backward step.

    Used as a context manager; operations whose inputs require gradients are
    recorded while it is active. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        if self.consumed:
            raise TapeStateError("cannot record onto a tape that has been differentiated")
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def custom_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    force_grad: bool = False,
) -> Tensor:
    """Wrap ``data`` as the output of an op with the given backward rule.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per input. ``force_grad`` records the op even when no input requires
    a gradient, for ops that own trainable state outside the tape.
    """
    needs = force_grad or any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = current_tape()
    if needs and tape is not None:
        tape.record(inputs, out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every gradient-requiring leaf seen by ``tape``.

    Gradients are accumulated into existing ``.grad`` arrays so micro-batches
    can be summed; call ``zero_grad`` between independent steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeStateError("backward already ran on this tape")
    tape.consumed = True

    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- binary ops ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return custom_op(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return custom_op(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data * b.data, (a, b), bw)


# -- unary ops ----------------------------------------------------------------

def scale(a: Tensor, c: float) -> Tensor:
    return custom_op(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return custom_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op(y, (a,), bw)


def rms_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Parameter-free RMS normalisation over the last axis."""
    k = a.shape[-1]
    r = np.sqrt((a.data * a.data).mean(axis=-1, keepdims=True) + eps)
    y = a.data / r

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True) / k) / r,)

    return custom_op(y, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    return custom_op(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, g.item()),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return custom_op(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, g.item() / n),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table``; ``ids`` may have any integer shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range for table of {table.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return custom_op(table.data[ids], (table,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean next-token cross-entropy for 2-D ``logits`` (n x vocab)."""
    n, _ = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: weights sum to zero")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -(w * logp[np.arange(n), targets]).sum() / total

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (p * (w[:, None] * (g.item() / total)),)

    return custom_op(np.array(loss), (logits,), bw)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = sub(pred, Tensor(target))
    return mean(mul(diff, diff))
