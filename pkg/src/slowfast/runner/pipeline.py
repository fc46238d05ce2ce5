"""Pretrain -> intervene -> fine-tune -> evaluate, for one seed."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .. import numcore as nc
from ..bench import DataSplit, batch_arrays, evaluate
from ..model import ModelParams, attach_head, forward
from ..probe import (CkaRecord, InterventionPlan, apply_freeze, apply_reinit, check_plans, cka_slope_gate,
                     performance_gap, track_cka)
from ..schedule import PolicyConfig, SlowFastScheduler, assign_weight_sets, noisytune_perturb

log = logging.getLogger(__name__)

METHODS = ("baseline_df", "noisytune", "slow_only", "fast_only", "slow_and_fast")


def policy_for_method(method: str, policy: PolicyConfig) -> PolicyConfig:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    slow = method in ("slow_only", "slow_and_fast")
    fast = method in ("fast_only", "slow_and_fast")
    return replace(policy, slow=slow, fast=fast)


@dataclass
class TrainSettings:
    steps: int = 500
    batch_size: int = 32
    lr: float = 5e-4
    warmup_fraction: float = 0.1
    eval_every: int = 20
    track_size: int = 500
    cka_smoothing: int = 5
    cka_window: int = 5
    noise_lambda: float = 0.15
    select_best: bool = True


@dataclass
class FinetuneResult:
    final: dict
    final_gap: float
    best_step: int
    gap_rows: list = field(default_factory=list)
    cka_rows: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    params: Optional[ModelParams] = None


def num_labels(kind: str) -> int:
    from ..bench import TAGS
    return 3 if kind == "classification" else len(TAGS)


def finetune(pretrained: ModelParams, split: DataSplit, method: str, policy: PolicyConfig,
             settings: TrainSettings, seed: int, plans: Sequence[InterventionPlan] = (),
             n_classes: Optional[int] = None, on_eval=None) -> FinetuneResult:
    """Fine-tune a copy of ``pretrained`` on ``split.train`` with the given method.

    Every ``eval_every`` steps: CKA of every layer against the pre-trained
    encoder on the current batch, and per-language validation metrics on
    the first ``track_size`` examples (also once before the first step).
    The returned final metrics are test metrics of the checkpoint with the
    best mean validation metric (or of the last step if ``select_best`` is
    off).
    """
    kind = split.kind
    policy = policy_for_method(method, policy)
    check_plans(plans)
    params = attach_head(pretrained, kind, n_classes or num_labels(kind), seed)
    if method == "noisytune":
        params = noisytune_perturb(params, settings.noise_lambda, seed)
    for plan in plans:
        if plan.kind == "reinitialize":
            params = apply_reinit(plan, params, seed=seed + 7919)
    trainable = params.trainable(kind)
    cfg = params.config
    scheduler = SlowFastScheduler(policy, assign_weight_sets(cfg.num_layers, params.tags,
                                                           policy.include_embedding))
    for plan in plans:
        if plan.kind == "freeze":
            apply_freeze(plan, scheduler, known_tags=params.tags)

    state = nc.AdamState()
    warm = nc.linear_warmup(int(settings.warmup_fraction * settings.steps))
    rng = np.random.default_rng(seed)
    n = len(split.train)
    order, cursor = rng.permutation(n), 0
    languages = split.languages
    source = languages[0]
    all_layers = range(1, cfg.num_layers + 1)
    top_two = [cfg.num_layers - 1, cfg.num_layers]

    # without held-out data (or a non-source language) there is nothing to track
    tracking = bool(split.validation) and len(languages) > 1
    result = FinetuneResult(final={}, final_gap=float("nan"), best_step=0)
    cka_records: list[CkaRecord] = []
    best_score, best_params = -np.inf, None

    def track(step):
        nonlocal best_score, best_params
        val = evaluate(params, split, "validation", limit=settings.track_size)
        rec = performance_gap(val, source, step=step)
        result.gap_rows.append((step, *[val[k] for k in languages], rec.gap))
        if on_eval is not None:
            on_eval(step, val, rec)
        mean_val = float(np.mean([val[k] for k in languages]))
        if step > 0 and settings.select_best and mean_val > best_score:
            best_score, best_params, result.best_step = mean_val, params.copy(), step

    if tracking:
        track(0)
    gate = False
    for step in range(1, settings.steps + 1):
        if cursor + settings.batch_size > n:
            order, cursor = rng.permutation(n), 0
        batch = [split.train[i] for i in order[cursor:cursor + settings.batch_size]]
        cursor += settings.batch_size
        ids, labels = batch_arrays(kind, batch)
        with nc.ComputationTape():
            logits, _ = forward(params, ids, kind)
            loss = nc.cross_entropy(logits, labels)
            nc.backward(loss)
        loss_value = loss.item()
        result.losses.append(loss_value)
        if step % settings.eval_every == 0:
            recs = track_cka(pretrained, params, ids, all_layers, step=step - 1)
            cka_records.extend(r for r in recs if r.layer_index in top_two)
            result.cka_rows.extend((r.step, r.layer_index, r.similarity) for r in recs)
            gate = cka_slope_gate(cka_records, window=settings.cka_window, smoothing=settings.cka_smoothing,
                                  layers=top_two)
        scheduler.scheduled_step(trainable, state, loss_value, settings.lr, warmup=warm, gate=gate)
        if tracking and (step % settings.eval_every == 0 or step == settings.steps):
            track(step)
    chosen = best_params if settings.select_best and best_params is not None else params
    if chosen is params:
        result.best_step = settings.steps
    if split.test and len(languages) > 1:
        result.final = evaluate(chosen, split, "test")
        result.final_gap = performance_gap(result.final, source).gap
    result.trace = list(scheduler.trace)
    result.params = chosen
    return result
