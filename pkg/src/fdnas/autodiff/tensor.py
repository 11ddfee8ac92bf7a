"""Tensors, parameters and the recording tape for reverse-mode differentiation."""

from __future__ import annotations

import contextvars
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = os.environ.get("FDNAS_DEBUG", "") not in ("", "0")

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "fdnas_active_tape", default=None
)


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named tensor owned by a network.

    ``id`` is a dotted path that is identical on every replica of the same
    network, which is what federated aggregation keys on. Buffers such as
    batch-norm running statistics are parameters with ``trainable=False``.
    """

    __slots__ = ("trainable",)

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable, name=name)
        self.trainable = trainable

    @property
    def id(self) -> str:
        return self.name


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives applied inside the block are
    recorded when any input requires a gradient.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        if self.consumed:
            raise RuntimeError("cannot record on a consumed tape")
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _active_tape.get()


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._token = _active_tape.set(None)

    def __exit__(self, *exc):
        _active_tape.reset(self._token)


def backward(
    tape: Tape,
    loss: Tensor,
    params: Iterable[Parameter] | None = None,
) -> dict[str, np.ndarray]:
    """Propagate d(loss) back through ``tape`` in reverse recording order.

    Leaf tensors that require grad get ``.grad`` set. Returns a map from
    parameter id to gradient; when ``params`` is given every listed
    parameter appears, with zeros if the loss does not reach it.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward")
    if not tape.nodes:
        raise ValueError("tape is empty")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        in_grads = node.vjp(gout)
        for tensor, g in zip(node.inputs, in_grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in produced:
                leaves[key] = tensor
    tape.consumed = True

    result: dict[str, np.ndarray] = {}
    for key, tensor in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(tensor.shape)
        tensor.grad = g
        if tensor.name is not None:
            if not math.isfinite(float(np.sum(g))) and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {tensor.name!r}")
            result[tensor.name] = g
    if params is not None:
        for p in params:
            if p.name not in result:
                result[p.name] = np.zeros_like(p.data)
    return result
