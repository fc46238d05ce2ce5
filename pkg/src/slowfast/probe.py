"""Freeze / re-initialize interventions, linear CKA tracking and gap records."""

from __future__ import annotations

import csv
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from decimal import Decimal
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import numcore as nc
from .model import PAD, ModelParams, ParamTag, encode, init_tensor
from .numcore import Tensor


@dataclass(frozen=True)
class InterventionPlan:
    kind: str
    target: frozenset

    def __post_init__(self):
        if self.kind not in ("freeze", "reinitialize"):
            raise ValueError(f"intervention kind must be freeze or reinitialize, got {self.kind!r}")
        if not self.target:
            raise ValueError("intervention target is empty")
        object.__setattr__(self, "target", frozenset(self.target))

    @property
    def applied_at(self) -> str:
        return "throughout" if self.kind == "freeze" else "before_training"


def check_plans(plans: Sequence[InterventionPlan]) -> None:
    seen: set = set()
    for plan in plans:
        dup = seen & plan.target
        if dup:
            raise ValueError(f"tags targeted by more than one plan: {sorted(t.name for t in dup)}")
        seen |= plan.target


def select_tags(params: ModelParams, layers: Optional[Iterable[int]] = None,
                sublayers: Optional[Iterable[str]] = None) -> frozenset:
    """Tags in the given layers (None: any) with the given sublayers (None: any)."""
    layers = None if layers is None else set(layers)
    sublayers = None if sublayers is None else set(sublayers)
    out = set()
    for tag in params.tags:
        if layers is not None and tag.layer_index not in layers:
            continue
        if sublayers is not None and tag.sublayer not in sublayers:
            continue
        out.add(tag)
    return frozenset(out)


def last_k_layers_plan(params: ModelParams, k: int) -> InterventionPlan:
    """Freeze everything except the top ``k`` layers and the task head."""
    top = params.config.num_layers - k
    keep = {t for t in params.tags if t.sublayer == "head" or (t.layer_index or 0) > top}
    return InterventionPlan("freeze", frozenset(params.tags) - keep)


def apply_freeze(plan: InterventionPlan, scheduler, known_tags: Optional[Iterable[ParamTag]] = None):
    """Pin K = 0 for every target tag on ``scheduler`` (returned for chaining)."""
    if plan.kind != "freeze":
        raise ValueError(f"apply_freeze needs a freeze plan, got {plan.kind}")
    known = set(known_tags) if known_tags is not None else None
    if known is not None:
        for tag in plan.target:
            if tag not in known:
                raise KeyError(f"unknown tag {tag.name}")
    scheduler.force(plan.target, 0.0)
    return scheduler


def apply_reinit(plan: InterventionPlan, params: ModelParams, seed: int, current_step: int = 0) -> ModelParams:
    """Copy of ``params`` with the target tensors re-drawn from the initializer."""
    if plan.kind != "reinitialize":
        raise ValueError(f"apply_reinit needs a reinitialize plan, got {plan.kind}")
    if current_step != 0:
        raise ValueError(f"re-initialization must happen before step 1, requested at step {current_step}")
    by_tag = {t.tag: name for name, t in params.items()}
    for tag in plan.target:
        if tag not in by_tag:
            raise KeyError(f"unknown tag {tag.name}")
    out = params.copy()
    for tag in plan.target:
        name = by_tag[tag]
        t = out[name]
        t.data = init_tensor(name, t.shape, seed)
    return out


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two activation matrices with the same row count."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"linear_cka: need (n, d) matrices with equal n, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("linear_cka: need at least 2 rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx == 0.0 or yy == 0.0:
        raise ValueError("linear_cka: degenerate activations (zero variance)")
    cross = np.linalg.norm(yc.T @ xc)
    return float(cross * cross / (xx * yy))


@dataclass(frozen=True)
class CkaRecord:
    step: int
    layer_index: int
    similarity: float


def token_rows(hidden: Tensor, ids: np.ndarray) -> np.ndarray:
    """(B, T, H) states -> (n_tokens, H) rows for the non-padding positions."""
    return hidden.data[np.asarray(ids) != PAD]


def track_cka(pretrained: ModelParams, current: ModelParams, ids: np.ndarray,
              layers: Iterable[int], step: int = 0) -> list[CkaRecord]:
    """Per-layer CKA between the two models' token representations of ``ids``."""
    if pretrained.config.hidden != current.config.hidden or pretrained.config.num_layers != current.config.num_layers:
        raise ValueError("track_cka: models have different encoder configs")
    with nc.no_grad():
        _, h_pre = encode(pretrained, ids)
        _, h_cur = encode(current, ids)
    return [CkaRecord(step, i, linear_cka(token_rows(h_pre[i - 1], ids), token_rows(h_cur[i - 1], ids)))
            for i in sorted(layers)]


def least_squares_slope(values: Sequence[float]) -> float:
    y = np.asarray(values, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def cka_slope_gate(records: Sequence[CkaRecord], window: int = 5, smoothing: int = 1,
                   layers: Optional[Sequence[int]] = None) -> bool:
    """True while the top-two-layer CKA series is still falling.

    Per step, the similarities of ``layers`` (default: the two highest layer
    indices present) are averaged; the series is smoothed by a trailing
    moving average of ``smoothing`` points and the least-squares slope over
    the last ``window`` smoothed points must be negative. Fewer than two
    smoothed points -> False.
    """
    if not records:
        return False
    if layers is None:
        layers = sorted({r.layer_index for r in records})[-2:]
    by_step: dict = OrderedDict()
    for r in records:
        if r.layer_index in layers:
            by_step.setdefault(r.step, []).append(r.similarity)
    series = [float(np.mean(v)) for _, v in sorted(by_step.items())]
    if smoothing > 1:
        series = [float(np.mean(series[i - smoothing + 1:i + 1])) for i in range(smoothing - 1, len(series))]
    tail = series[-window:]
    if len(tail) < 2:
        return False
    return least_squares_slope(tail) < 0.0


@dataclass(frozen=True)
class GapRecord:
    step: int
    source_metric: float
    non_source_mean: float
    gap: float


def _dec(x: float) -> Decimal:
    return Decimal(repr(float(x)))


def performance_gap(results: Mapping, source, step: int = 0) -> GapRecord:
    """Source metric minus the unweighted mean over all other languages.

    Arithmetic is done on the metrics' shortest decimal representations, so
    reported values like 84.8 and 74.0 give a gap of exactly 10.8.
    """
    if source not in results:
        raise KeyError(f"source language {source!r} missing from results")
    others = [v for k, v in results.items() if k != source]
    if not others:
        raise ValueError("need at least one non-source language")
    src = _dec(results[source])
    mean = sum((_dec(v) for v in others), Decimal(0)) / len(others)
    return GapRecord(step, float(src), float(mean), float(src - mean))


class MetricsWriter:
    """Append-only CSV file that writes its header exactly once."""

    def __init__(self, path, header: Sequence[str]):
        self.path = path
        self.header = list(header)
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def append(self, row: Sequence) -> None:
        if len(row) != len(self.header):
            raise ValueError(f"row has {len(row)} fields, header has {len(self.header)}")
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_cell(v) for v in row])


def _cell(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def gap_header(languages: Sequence) -> list[str]:
    return ["step"] + [f"lang{lang}" for lang in languages] + ["gap"]


CKA_HEADER = ("step", "layer", "similarity")
