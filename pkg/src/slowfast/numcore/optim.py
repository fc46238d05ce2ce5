"""Adam with linear warm-up and per-parameter step multipliers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import NumericalError, Tensor


def linear_warmup(warmup_steps: int) -> Callable[[int], float]:
    """Factor ramping linearly from 1/warmup_steps to 1, then flat."""
    if warmup_steps <= 0:
        return lambda step: 1.0

    def factor(step: int) -> float:
        return min(1.0, step / warmup_steps)

    return factor


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def init(self, params: Sequence[Tensor]) -> "AdamState":
        for i, p in enumerate(params):
            self.m.setdefault(i, np.zeros_like(p.data))
            self.v.setdefault(i, np.zeros_like(p.data))
        return self


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    base_lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    warmup: Optional[Callable[[int], float]] = None,
    multipliers: Optional[Sequence[float]] = None,
    mode: str = "adam",
) -> None:
    """One in-place update of ``params``.

    The effective step for parameter i is ``base_lr * warmup(step) * K_i``,
    applied after moment normalization. A ``None`` gradient skips the
    parameter entirely. ``mode="sgd"`` drops the moments: theta -= step * g.
    """
    if base_lr <= 0:
        raise ValueError(f"base_lr must be positive, got {base_lr}")
    if mode not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer mode {mode!r}")
    if len(grads) != len(params):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    state.step += 1
    t = state.step
    lr_t = base_lr * (warmup(t) if warmup is not None else 1.0)
    b1, b2 = betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {p.tag}")
        k = 1.0 if multipliers is None else multipliers[i]
        step = lr_t * k
        if mode == "sgd":
            if step != 0.0:
                p.data -= step * g
            continue
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if step != 0.0:
            p.data -= step * (m / bc1) / (np.sqrt(v / bc2) + eps)
