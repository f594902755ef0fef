"""Minimal reverse-mode differentiation engine.

Values are :class:`Tensor` objects wrapping a numpy array. Operations that
see an active :class:`Tape` and at least one input with ``requires_grad``
append a node holding their backward rule; :func:`backward` then replays the
tape in reverse. Without an active tape every op is a plain forward call, which
is how inference runs.

Typical use::

    with Tape() as tape:
        loss = ops.bce_loss(model_output, target)
    backward(tape, loss)
    sgd_step(params, state)
    zero_grad(params)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import NumericError, ShapeError, TapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_ACTIVE: list["Tape"] = []


class Tensor:
    """An n-d array with an optional gradient buffer.

    Image tensors are laid out height x width x channels (optionally with a
    leading batch axis), so the flat row-major order has channels innermost.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


class Node(NamedTuple):
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    # which piece of a piecewise op was taken (ReLU sign, pool argmax, ...)
    branch: np.ndarray | None = None


class Tape:
    """Ordered record of executed ops.

    Nodes are appended in execution order, which is already a topological
    order of the computation. A tape becomes frozen when its ``with`` block
    exits or when :func:`backward` runs over it; frozen tapes reject new nodes.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.frozen = False
        self._produced: set[int] = set()

    @property
    def mode(self) -> str:
        return "frozen" if self.frozen else "recording"

    def __enter__(self) -> "Tape":
        if self.frozen:
            raise TapeError("cannot re-enter a frozen tape")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)
        self.frozen = True

    def append(self, node: Node) -> None:
        if self.frozen:
            raise TapeError(f"tape is frozen; cannot record {node.op}")
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._produced

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(
    op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn, branch: np.ndarray | None = None
) -> Tensor:
    """Wrap a forward result and, if gradients are wanted, log its backward rule.

    Every op funnels through here, so this is also where non-finite forward
    values are caught. Ops that are only piecewise smooth pass ``branch`` so
    that :func:`grad_check` can tell when a perturbation crossed a kink.
    """
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite value in forward output")
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out)
    if needs_grad:
        result.requires_grad = True
        tape.append(Node(op, tuple(inputs), result, backward_fn, branch))
    return result


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a 0-d tensor."""

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", [x], np.asarray(x.data.sum(), dtype=x.dtype), grad_fn)


def backward(tape: Tape, loss: Tensor) -> None:
    """Fill ``grad`` of every requires-grad tensor reachable from ``loss``.

    Leaf gradients are added to the existing buffer (callers zero them with
    :func:`zero_grad`); intermediate tensors receive a fresh gradient array.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss not in tape:
        raise TapeError("loss was not produced under this tape")
    tape.frozen = True

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            if not np.all(np.isfinite(gi)):
                raise NumericError(f"{node.op}: non-finite value in gradient")
            key = id(t)
            pending[key] = pending[key] + gi if key in pending else gi
            if t not in tape:
                leaves[key] = t

    for key, t in leaves.items():
        g = pending[key]
        if t.grad is None:
            t.grad = np.array(g, dtype=t.dtype, copy=True)
        else:
            t.grad += g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0)


@dataclass
class OptimizerState:
    """SGD with momentum and coupled (L2-style) weight decay."""

    learning_rate: float = 0.0004
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "OptimizerState":
        state = cls(**hyper)
        state.velocity = [np.zeros_like(p.data) for p in params]
        return state


def sgd_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """``v <- mu*v + (g + wd*p)``; ``p <- p - lr*v``, in place. Grads are left alone."""
    if len(params) != len(state.velocity):
        raise ShapeError(f"{len(params)} params but {len(state.velocity)} velocity buffers")
    for p, v in zip(params, state.velocity):
        if p.grad is None:
            raise TapeError(f"parameter {p.name or '<unnamed>'} has no gradient")
        if v.shape != p.shape:
            raise ShapeError(f"velocity shape {v.shape} does not match parameter {p.name} {p.shape}")
        v *= state.momentum
        v += p.grad
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data -= state.learning_rate * v


def grad_check(op_under_test: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between backprop and central differences.

    ``op_under_test`` is reduced with a plain sum. Only inputs flagged
    ``requires_grad`` are perturbed (all of them if none are flagged). Inputs
    must be float64; the check is meaningless in single precision.

    A difference quotient across a kink measures neither one-sided slope, so
    when a step changes any recorded branch the coordinate is redone with a
    step ten times smaller, at most :data:`KINK_RETRIES` times.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 inputs, got {t.dtype}")
    checked = [t for t in inputs if t.requires_grad]
    if not checked:
        checked = list(inputs)
        for t in checked:
            t.requires_grad = True
    n = sum(t.size for t in checked)
    if n > 10_000:
        raise ValueError(f"grad_check enumerates every element; {n} > 10000")

    zero_grad(checked)
    with Tape() as tape:
        loss = sum_all(op_under_test(*inputs))
    backward(tape, loss)
    analytic = [t.grad.copy() for t in checked]
    base = _branches(tape)

    def probe() -> tuple[float, list[np.ndarray]]:
        with Tape() as t:
            value = float(np.sum(op_under_test(*inputs).data))
        if not np.isfinite(value):
            raise NumericError("grad_check: non-finite forward value")
        return value, _branches(t)

    def same(branches) -> bool:
        return len(branches) == len(base) and all(np.array_equal(a, b) for a, b in zip(branches, base))

    worst = 0.0
    for t, a in zip(checked, analytic):
        flat = t.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = eps
            for attempt in range(KINK_RETRIES + 1):
                flat[i] = orig + h
                f_plus, b_plus = probe()
                flat[i] = orig - h
                f_minus, b_minus = probe()
                flat[i] = orig
                if same(b_plus) and same(b_minus):
                    break
                h /= 10
            # divide by the step actually taken, after rounding
            numeric = (f_plus - f_minus) / ((orig + h) - (orig - h))
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst


KINK_RETRIES = 3


def _branches(tape: Tape) -> list[np.ndarray]:
    return [node.branch for node in tape.nodes if node.branch is not None]
