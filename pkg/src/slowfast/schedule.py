"""Phase- and layer-dependent learning-rate multipliers.

Fine-tuning is split into a steep-loss phase ``P1`` and a slow phase ``P2``
by comparing loss averages over two consecutive windows. Four policies then
pick a multiplier K for every tensor:

* I   -- bottom-layer tensors (``s1``) move at ``c1`` times the base rate in P1;
* II  -- bottom feed-forward tensors (``s2``) move at ``R(phi)`` in P2;
* III -- top-layer tensors (``v1``) are never slowed down;
* IV  -- top attention tensors (``v2``) move at ``c2`` times the base rate in P2
  while the policy is active.

K scales the Adam step after moment normalization, so K = 0 freezes a tensor.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numcore as nc
from .model import ModelParams, ParamTag
from .numcore import NumericalError

P1, P2 = "P1", "P2"
POLICY4_MODES = ("off", "always", "cka_gated")


class ScheduleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    c1: float = 0.01
    c2: float = 10.0
    r_exp: int = 3
    tau: float = 0.1
    window_size: int = 20
    policy4_mode: str = "cka_gated"
    slow: bool = True
    fast: bool = True
    include_embedding: bool = False  # put the embedding table into S^I

    def __post_init__(self):
        if not 0.0 <= self.c1 <= 1.0:
            raise ScheduleConfigError(f"c1 must lie in [0, 1], got {self.c1}")
        if self.c2 < 1.0:
            raise ScheduleConfigError(f"c2 must be >= 1, got {self.c2}")
        if int(self.r_exp) != self.r_exp or self.r_exp < 1:
            raise ScheduleConfigError(f"r_exp must be a positive integer, got {self.r_exp}")
        if math.isnan(self.tau):
            raise ScheduleConfigError("tau must not be NaN")
        if self.window_size < 1:
            raise ScheduleConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.policy4_mode not in POLICY4_MODES:
            raise ScheduleConfigError(f"policy4_mode must be one of {POLICY4_MODES}, got {self.policy4_mode!r}")


# The intended regime is c1 < 1 < c2 and tau > 0; boundary values (c1 = c2 = 1,
# tau = +/-inf) are accepted so neutral and degenerate runs can be expressed.


class LossWindow:
    """The last ``2 * window_size`` training losses."""

    def __init__(self, window_size: int = 20):
        if window_size < 1:
            raise ValueError(f"window_size must be >= 1, got {window_size}")
        self.window_size = window_size
        self.values: deque = deque(maxlen=2 * window_size)
        self.count = 0

    @property
    def capacity(self) -> int:
        return self.values.maxlen

    @property
    def full(self) -> bool:
        return len(self.values) == self.capacity

    def observe(self, loss: float) -> "LossWindow":
        loss = float(loss)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite training loss {loss} at observation {self.count + 1}")
        self.values.append(loss)
        self.count += 1
        return self

    @property
    def recent_sum(self) -> float:
        vals = list(self.values)[-self.window_size:]
        return math.fsum(vals) if self.full else float("nan")

    @property
    def prior_sum(self) -> float:
        vals = list(self.values)[: self.window_size]
        return math.fsum(vals) if self.full else float("nan")


def observe_loss(window: LossWindow, loss: float) -> LossWindow:
    return window.observe(loss)


def phi(window: LossWindow) -> float:
    """Ratio of the recent window's loss sum to the prior window's."""
    if not window.full:
        raise ValueError(f"phi needs {window.capacity} losses, have {len(window.values)}")
    prior = window.prior_sum
    if prior <= 0.0:
        raise ValueError(f"prior-window loss sum must be positive, got {prior}")
    return window.recent_sum / prior


def r_multiplier(phi_value: float, r_exp: int) -> float:
    """``max(1 - phi**r_exp, 0)``: 1 while loss collapses, 0 once it is flat or rising."""
    if phi_value < 0:
        raise ValueError(f"phi must be non-negative, got {phi_value}")
    return max(1.0 - phi_value ** r_exp, 0.0)


@dataclass
class PhaseState:
    tau: float = 0.1
    phase: str = P1
    latched: bool = False


def in_phase_one(window: LossWindow, state: PhaseState) -> bool:
    """P1 test: mean-loss drop between the two windows exceeds ``tau``.

    Too little history counts as P1. The first failing test moves ``state``
    to P2 for good.
    """
    if state.latched:
        return False
    if not window.full:
        return True
    drop = (window.prior_sum - window.recent_sum) / window.window_size
    if drop > state.tau:
        return True
    state.latched = True
    state.phase = P2
    return False


@dataclass(frozen=True)
class WeightSetAssignment:
    s1: frozenset
    s2: frozenset
    v1: frozenset
    v2: frozenset

    def __post_init__(self):
        if not self.s2 <= self.s1:
            raise ScheduleConfigError("s2 must be a subset of s1")
        if not self.v2 <= self.v1:
            raise ScheduleConfigError("v2 must be a subset of v1")
        if self.s1 & self.v1:
            raise ScheduleConfigError("s1 and v1 must be disjoint")

    def layers(self, which: str) -> list[int]:
        return sorted({t.layer_index for t in getattr(self, which) if t.layer_index is not None})


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def layer_split(num_layers: int) -> tuple[int, int, int]:
    """(#bottom layers in s1, #bottom layers hosting s2, #top layers in v1).

    12 layers give (10, 4, 2); other depths scale those fractions, rounding
    half up, with at least one layer each and the top layers winning any
    overlap with the bottom ones.
    """
    if num_layers < 2:
        raise ScheduleConfigError(f"need at least 2 layers, got {num_layers}")
    n_top = max(1, _half_up(2 * num_layers / 12))
    n_s1 = min(_half_up(10 * num_layers / 12), num_layers - n_top)
    n_s2 = min(max(1, _half_up(4 * num_layers / 12)), n_s1)
    return n_s1, n_s2, n_top


def assign_weight_sets(num_layers: int, tags: Iterable[ParamTag],
                       include_embedding: bool = False) -> WeightSetAssignment:
    n_s1, n_s2, n_top = layer_split(num_layers)
    top = num_layers - n_top
    s1, s2, v1, v2 = set(), set(), set(), set()
    for tag in tags:
        if tag.layer_index is None:
            if include_embedding and tag.sublayer == "embedding":
                s1.add(tag)
            continue
        if tag.layer_index > num_layers:
            raise ScheduleConfigError(f"tag {tag.name} has layer {tag.layer_index} > {num_layers}")
        if tag.layer_index <= n_s1:
            s1.add(tag)
            if tag.layer_index <= n_s2 and tag.sublayer == "feed_forward":
                s2.add(tag)
        elif tag.layer_index > top:
            v1.add(tag)
            if tag.sublayer == "attention":
                v2.add(tag)
    return WeightSetAssignment(frozenset(s1), frozenset(s2), frozenset(v1), frozenset(v2))


def multiplier_for(tag: ParamTag, phase: str, phi_value: Optional[float], config: PolicyConfig,
                   policy4_active: bool, assignment: WeightSetAssignment) -> float:
    in_s = tag in assignment.s1 or tag in assignment.s2
    in_v = tag in assignment.v1 or tag in assignment.v2
    if in_s and in_v:
        raise ScheduleConfigError(f"tag {tag.name} is in both a slow and a fast set")
    if phase == P1:
        if config.slow and tag in assignment.s1:
            return config.c1
        return 1.0
    if phase != P2:
        raise ValueError(f"unknown phase {phase!r}")
    if config.fast and policy4_active and tag in assignment.v2:
        return config.c2
    if config.slow and tag in assignment.s2:
        if phi_value is None:
            raise ValueError("policy II needs phi, but no phi is available")
        return r_multiplier(phi_value, config.r_exp)
    return 1.0


TRACE_HEADER = ("step", "phase", "phi", "K_s1", "K_s2", "K_v2")


@dataclass
class SlowFastScheduler:
    """Owns the loss window and phase latch for one training run."""

    config: PolicyConfig
    assignment: WeightSetAssignment
    overrides: dict = field(default_factory=dict)
    window: LossWindow = None
    state: PhaseState = None
    trace: list = field(default_factory=list)
    step: int = 0
    last_phi: Optional[float] = None

    def __post_init__(self):
        if self.window is None:
            self.window = LossWindow(self.config.window_size)
        if self.state is None:
            self.state = PhaseState(tau=self.config.tau)

    @property
    def phase(self) -> str:
        return self.state.phase

    def force(self, tags: Iterable[ParamTag], k: float) -> None:
        for tag in tags:
            self.overrides[tag] = k

    def policy4_active(self, gate: Optional[bool]) -> bool:
        mode = self.config.policy4_mode
        if mode == "off":
            return False
        if mode == "always":
            return True
        return bool(gate)

    def observe(self, loss: float) -> None:
        self.window.observe(loss)
        self.step += 1
        in_phase_one(self.window, self.state)
        self.last_phi = phi(self.window) if self.window.full and self.window.prior_sum > 0 else None

    def multiplier(self, tag: ParamTag, gate: Optional[bool] = None) -> float:
        if tag in self.overrides:
            return self.overrides[tag]
        return multiplier_for(tag, self.state.phase, self.last_phi, self.config,
                              self.policy4_active(gate), self.assignment)

    def multipliers(self, tags: Sequence[ParamTag], gate: Optional[bool] = None) -> list[float]:
        return [self.multiplier(t, gate) for t in tags]

    def trace_row(self, gate: Optional[bool] = None) -> tuple:
        def rep(group, exclude=frozenset()):
            members = sorted(group - exclude)
            return self.multiplier(members[0], gate) if members else float("nan")

        phi_val = self.last_phi if self.last_phi is not None else float("nan")
        return (self.step, self.state.phase, phi_val,
                rep(self.assignment.s1, self.assignment.s2),
                rep(self.assignment.s2), rep(self.assignment.v2))

    def scheduled_step(self, params: Sequence[nc.Tensor], opt_state: nc.AdamState, loss: float,
                       base_lr: float, warmup=None, gate: Optional[bool] = None,
                       betas=(0.9, 0.999), eps: float = 1e-8, mode: str = "adam") -> list[float]:
        """Record ``loss``, refresh phase and phi, then take one scaled Adam step."""
        self.observe(loss)
        ks = self.multipliers([p.tag for p in params], gate)
        nc.adam_step(params, [p.grad for p in params], opt_state, base_lr, betas=betas, eps=eps,
                     warmup=warmup, multipliers=ks, mode=mode)
        if self.step % self.config.window_size == 0:
            self.trace.append(self.trace_row(gate))
        return ks

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for row in self.trace:
                w.writerow([_fmt(x) for x in row])


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def noisytune_perturb(params: ModelParams, lam: float = 0.15, seed: int = 0) -> ModelParams:
    """Add U(-lam*std, lam*std) noise to every pre-trained weight matrix.

    ``std`` is the matrix's own elementwise standard deviation; vectors and
    task-head tensors are left alone.
    """
    if lam < 0:
        raise ValueError(f"noise intensity must be >= 0, got {lam}")
    out = params.copy()
    if lam == 0:
        return out
    rng = np.random.default_rng(seed)
    for name, t in out.items():
        if t.data.ndim < 2 or name.startswith("head."):
            continue
        sigma = float(t.data.std())
        t.data += rng.uniform(-lam * sigma, lam * sigma, size=t.shape)
    return out
