"""Momentum SGD for weights, Adam for architecture parameters, cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Parameter


@dataclass
class OptimizerState:
    kind: str  # "sgd_momentum" | "adam"
    lr: float
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    group: str = "weights"  # "arch" forces weight_decay to 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.group == "arch":
            self.weight_decay = 0.0

    def reset(self) -> None:
        self.buffers.clear()

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat view of every buffer, keyed ``<param id>/<slot>``."""
        return {f"{pid}/{slot}": arr for pid, slots in self.buffers.items() for slot, arr in slots.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.buffers.clear()
        for key, arr in arrays.items():
            pid, slot = key.rsplit("/", 1)
            self.buffers.setdefault(pid, {})[slot] = np.array(arr, dtype=np.float64)


def _check(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], state: OptimizerState, kind: str):
    if state.kind != kind:
        raise ValueError(f"optimizer state is {state.kind!r}, expected {kind!r}")
    missing = [pid for pid in params if pid not in grads]
    if missing:
        raise KeyError(f"missing gradient for parameter ids {missing}")


def sgd_momentum_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float | None = None,
) -> None:
    """In place: v <- mu*v + g + wd*w ; w <- w - lr*v."""
    _check(params, grads, state, "sgd_momentum")
    lr = state.lr if lr is None else lr
    for pid, p in params.items():
        g = grads[pid]
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        slots = state.buffers.get(pid)
        if slots is None:
            v = np.array(g, dtype=np.float64)
            state.buffers[pid] = {"v": v}
        else:
            v = slots["v"]
            v *= state.momentum
            v += g
        p.data -= lr * v


def adam_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    masks: Mapping[str, np.ndarray] | None = None,
    lr: float | None = None,
) -> None:
    """Bias-corrected Adam, in place.

    ``masks`` restricts the update (moments, step counts and values) to the
    selected elements of a parameter; the step count is kept per element so
    partially-updated vectors stay correctly bias-corrected.
    """
    _check(params, grads, state, "adam")
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    for pid, p in params.items():
        g = np.asarray(grads[pid], dtype=np.float64)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        slots = state.buffers.get(pid)
        if slots is None:
            slots = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": np.zeros_like(p.data)}
            state.buffers[pid] = slots
        sel = np.ones(p.data.shape, dtype=bool) if masks is None or pid not in masks else np.asarray(masks[pid], bool)
        m, v, t = slots["m"], slots["v"], slots["t"]
        m[sel] = b1 * m[sel] + (1.0 - b1) * g[sel]
        v[sel] = b2 * v[sel] + (1.0 - b2) * g[sel] * g[sel]
        t[sel] += 1.0
        mhat = m[sel] / (1.0 - b1 ** t[sel])
        vhat = v[sel] / (1.0 - b2 ** t[sel])
        p.data[sel] -= lr * mhat / (np.sqrt(vhat) + state.eps)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total)) / 2."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))
