"""Dense float64 tensors with a reverse-mode computation tape."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class NumericalError(RuntimeError):
    """A non-finite value showed up where only finite values are allowed."""


class Tensor:
    """A float64 array, optionally tracked for gradients.

    ``tag`` is whatever label the owner wants attached (the model stores a
    :class:`~slowfast.model.ParamTag` there); numcore never inspects it.
    """

    __slots__ = ("data", "grad", "requires_grad", "tag", "_node")

    def __init__(self, data, requires_grad: bool = False, tag=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tag = tag
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, tag=self.tag)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, tag={self.tag!r})"


def _not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class ComputationTape:
    """Ordered record of primitive ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []

    def __enter__(self) -> "ComputationTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()


_TAPES: list[ComputationTape] = []
_GRAD_ENABLED = [True]


def active_tape() -> Optional[ComputationTape]:
    return _TAPES[-1] if _TAPES and _GRAD_ENABLED[-1] else None


@contextmanager
def no_grad() -> Iterator[None]:
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` and, if any input is tracked, push a node on the tape.

    ``backward(g)`` must return one gradient array (or None) per input.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        node = _Node(out, inputs, backward)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, tape: Optional[ComputationTape] = None) -> list[Tensor]:
    """Reverse-mode sweep from a scalar ``loss``.

    Sets ``.grad`` on every tracked leaf reachable from ``loss`` (overwriting
    any previous value), clears the tape and returns the leaves touched.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else (_TAPES[-1] if _TAPES else None)
    if tape is None or loss._node is None or loss._node not in _tail(tape, loss._node):
        raise ValueError("loss was not produced on the current tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.is_leaf:
                leaves[key] = t
    touched = []
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.ascontiguousarray(g) if g is not None else np.zeros_like(t.data)
        touched.append(t)
    tape.clear()
    return touched


def _tail(tape: ComputationTape, node: _Node):
    # the loss is almost always the last node; avoid an O(n) scan
    if tape.nodes and tape.nodes[-1] is node:
        return (node,)
    return tape.nodes


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")
