"""Dense float64 tensors with reverse-mode gradients.

The engine is deliberately small: it supports exactly the operations the
point-transformer training graph needs (linear maps, elementwise ops,
softmax, reductions, neighbor gather, cross-entropy) and nothing else.
Ops executed while a :class:`Tape` is active are recorded in execution
order; one :func:`backward` pass over the tape yields gradients for every
``requires_grad`` leaf reachable from the loss.

Conventions:

- all values are 64-bit floats; any op producing NaN/Inf raises
  :class:`NonFiniteError` immediately,
- tensors are immutable after creation except through :func:`sgd_step`,
- gradient accumulation walks the tape in reverse creation order, so two
  backward passes over the same tape are bit-identical,
- max reductions route their gradient to the first (lowest index) argmax.

A tape and the tensors it references are confined to one thread; the
active-tape stack is thread-local so independent training contexts can run
concurrently.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape" | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


class Tape:
    """Ordered record of executed ops; context manager activates it."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    _ensure_finite(out_data, op)
    out = Tensor(out_data)
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        tape = stack[-1]
        out.requires_grad = True
        out._tape = tape
        out._node = len(tape._nodes)
        tape._nodes.append(_Node(out, inputs, vjp))
    return out


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting: reduce grad back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    return _record("matmul", a_data @ b_data, (a, b), vjp)


def _broadcast_shapes(op: str, sa, sb) -> None:
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast") from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _sum_to(g, sa), _sum_to(g, sb)

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _sum_to(g, sa), -_sum_to(g, sb)

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("mul", a.shape, b.shape)
    a_data, b_data, sa, sb = a.data, b.data, a.shape, b.shape

    def vjp(g):
        return _sum_to(g * b_data, sa), _sum_to(g * a_data, sb)

    return _record("mul", a_data * b_data, (a, b), vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _record("scale", a.data * factor, (a,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at exactly 0 is defined as 0

    def vjp(g):
        return (g * mask,)

    return _record("relu", np.maximum(x.data, 0.0), (x,), vjp)


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = g * out
        return (inner - out * inner.sum(axis=axis, keepdims=True),)

    return _record("softmax", out, (x,), vjp)


def reduce(x: Tensor, kind: str, axis: int | None = None) -> Tensor:
    """Reduce along ``axis`` (all axes when None). kind: mean | sum | max."""
    if kind not in ("mean", "sum", "max"):
        raise ValueError(f"unknown reduction kind {kind!r}")
    data = x.data
    if axis is not None:
        if not -data.ndim <= axis < data.ndim:
            raise ShapeError(f"reduce axis {axis} invalid for shape {x.shape}")
        axis = axis % data.ndim
        extent = data.shape[axis]
    else:
        extent = data.size
    if extent == 0:
        raise ShapeError("reduce over an empty axis")
    in_shape = data.shape

    if kind == "max":
        if axis is None:
            out_data = data.max()
            flat_idx = int(np.argmax(data))  # first maximum

            def vjp(g):
                gx = np.zeros(in_shape)
                gx.reshape(-1)[flat_idx] = g
                return (gx,)
        else:
            out_data = data.max(axis=axis)
            arg = np.expand_dims(np.argmax(data, axis=axis), axis)

            def vjp(g):
                gx = np.zeros(in_shape)
                np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis)
                return (gx,)
    else:
        denom = float(extent) if kind == "mean" else 1.0
        out_data = data.sum(axis=axis) / denom if kind == "mean" else data.sum(axis=axis)

        def vjp(g):
            if axis is None:
                return (np.full(in_shape, g / denom),)
            return (np.broadcast_to(np.expand_dims(g, axis) / denom, in_shape).copy(),)

    return _record(f"reduce-{kind}", np.asarray(out_data, dtype=np.float64), (x,), vjp)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick rows of a 2-D tensor: out[..., :] = x[idx[...], :]."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather needs a 2-D source, got {x.shape}")
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather index out of range [0, {x.shape[0]})")
    n, c = x.shape

    def vjp(g):
        gx = np.zeros((n, c))
        np.add.at(gx, idx.reshape(-1), g.reshape(-1, c))
        return (gx,)

    return _record("gather", x.data[idx], (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    in_shape = x.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _record("reshape", x.data.reshape(shape), (x,), vjp)


_PROB_FLOOR = 1e-12


def cross_entropy(probs: Tensor, onehot: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean negative log-likelihood of one-hot targets.

    ``probs`` rows must sum to 1 within 1e-6; probabilities are clamped to
    [1e-12, 1] before the log.  With ``weights`` (constant, non-negative)
    the per-sample losses are averaged with those weights — used for the
    mask-weighted classification loss; default is a plain mean.
    """
    p, y = probs.data, onehot.data
    if p.ndim != 2 or p.shape != y.shape:
        raise ShapeError(f"cross_entropy shapes disagree: {probs.shape} vs {onehot.shape}")
    if p.shape[0] == 0:
        raise ValueError("cross_entropy on an empty batch")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("cross_entropy probabilities must sum to 1 per row")

    if weights is None:
        w = np.ones(p.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (p.shape[0],):
            raise ShapeError(f"weights shape {w.shape} does not match batch {p.shape[0]}")
        if (w < 0).any():
            raise ValueError("cross_entropy weights must be non-negative")
    total_w = w.sum()
    if total_w <= 0:
        raise ValueError("cross_entropy weights sum to zero")

    clamped = np.clip(p, _PROB_FLOOR, 1.0)
    per_sample = -(y * np.log(clamped)).sum(axis=1)
    out_data = np.float64((w * per_sample).sum() / total_w)
    pass_grad = (p >= _PROB_FLOOR) & (p <= 1.0)

    def vjp(g):
        gp = -(y / clamped) * (w / total_w)[:, None] * g
        return (np.where(pass_grad, gp, 0.0), None)

    return _record("cross_entropy", out_data, (probs, onehot), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map y = x @ weight (+ bias)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# backward and optimizer step
# ---------------------------------------------------------------------------

def backward(loss: Tensor, leaves: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss for every reachable requires_grad leaf.

    Returns a map leaf-tensor -> gradient array and also sets ``.grad`` on
    those leaves.  Leaves passed in ``leaves`` that the loss does not reach
    get explicit zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not tape._nodes:
        raise ValueError("loss is not attached to a non-empty tape")

    partials: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape._nodes[: loss._node + 1]):
        g = partials.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf():
                prev = grads.get(inp)
                grads[inp] = gi if prev is None else prev + gi
            else:
                prev = partials.get(id(inp))
                partials[id(inp)] = gi if prev is None else prev + gi

    for leaf in leaves:
        if leaf.requires_grad and leaf not in grads:
            grads[leaf] = np.zeros_like(leaf.data)
    for leaf, g in grads.items():
        leaf.grad = g
    return grads


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
    """w <- w - lr * g for every named parameter present in ``grads``.

    Parameters are visited in sorted-name order; parameters with no
    gradient entry are left untouched.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        t = params[name]
        if np.shape(g) != t.shape:
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {t.shape} ({name})")
        t.data = t.data - lr * g
