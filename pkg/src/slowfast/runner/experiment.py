"""Multi-seed experiments, probe sweeps and hyper-parameter grids.

Every run writes plain files under its output directory::

    <out>/seed<k>/gap.csv      step, per-language validation metric, gap
    <out>/seed<k>/cka.csv      step, layer, similarity
    <out>/seed<k>/trace.csv    policy trace (step, phase, phi, K_s1, K_s2, K_v2)
    <out>/seed<k>/result.json  final test metrics of the selected checkpoint
    <out>/summary.json         per-seed finals, means and standard deviations

A seed that raises leaves its partial files plus a ``FAILED`` marker.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import traceback
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..bench import DataSplit, GrammarSpec, generate_corpus, make_languages, make_task, pretraining_corpus
from ..model import ModelParams, build_model, load_params, pretrain_mlm, save_params
from ..probe import CKA_HEADER, InterventionPlan, MetricsWriter, gap_header, last_k_layers_plan, select_tags
from ..schedule import TRACE_HEADER
from .config import ConfigError, ExperimentConfig, replace_in
from .pipeline import finetune, num_labels

log = logging.getLogger(__name__)

OUTPUT_ENV = "SLOWFAST_OUTPUT"
GRID_AXES = ("c1", "c2", "r_exp", "M")


def output_root(flag: Optional[str] = None) -> str:
    """``flag`` if given, else ``$SLOWFAST_OUTPUT``, else ``./runs``."""
    return flag or os.environ.get(OUTPUT_ENV) or "runs"


# ---- data and pre-training -----------------------------------------------------

def build_split(config: ExperimentConfig) -> DataSplit:
    b = config.bench
    languages = make_languages(b.num_languages, config.model.vocab_size, b.language_seed)
    corpus = generate_corpus(GrammarSpec(), b.n_train + b.n_validation + b.n_test, b.corpus_seed)
    return make_task(b.task, corpus, languages, b.n_train, b.n_validation, b.n_test,
                     few_shot_m=b.few_shot_m, few_shot_pool=b.few_shot_pool, seed=b.split_seed)


def pretrain(config: ExperimentConfig, path: Optional[str] = None) -> ModelParams:
    b, p = config.bench, config.pretrain
    languages = make_languages(b.num_languages, config.model.vocab_size, b.language_seed)
    corpus = pretraining_corpus(languages, GrammarSpec(), b.pretrain_per_language, seed=p.corpus_seed,
                                code_switch_rate=b.code_switch_rate)
    params = build_model(config.model, p.seed)
    params = pretrain_mlm(params, corpus, mask_rate=p.mask_rate, steps=p.steps, seed=p.seed,
                          batch_size=p.batch_size, lr=p.lr, warmup_fraction=p.warmup_fraction,
                          log_every=max(1, p.steps // 10))
    if path:
        save_params(path, params, step=p.steps, extra={"pretrain_key": config.pretrain_key()})
    return params


def cached_pretrained(config: ExperimentConfig, cache_dir: str) -> ModelParams:
    """Load the checkpoint for this config's pre-training key, training it on a miss."""
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"pretrained-{config.pretrain_key()}.ckpt")
    if os.path.exists(path):
        log.info("using cached pre-trained model %s", path)
        return load_params(path)
    log.info("pre-training (cache miss) -> %s", path)
    return pretrain(config, path)


# ---- interventions -------------------------------------------------------------

def _parse_layers(raw: str, num_layers: int) -> Optional[list]:
    raw = raw.strip()
    if not raw:
        return None
    out = []
    for part in raw.replace(" ", "").split(","):
        lo, dash, hi = part.partition("-")
        try:
            out.extend(range(int(lo), int(hi) + 1) if dash else [int(lo)])
        except ValueError:
            raise ConfigError(f"intervention.layers: cannot parse {raw!r}") from None
    bad = [i for i in out if not 1 <= i <= num_layers]
    if bad:
        raise ConfigError(f"intervention.layers out of range 1..{num_layers}: {bad}")
    return out


def intervention_plans(config: ExperimentConfig, params: ModelParams) -> tuple:
    iv = config.intervention
    if iv.kind == "none":
        return ()
    if iv.kind == "last_k":
        if not 1 <= iv.last_k < config.model.num_layers:
            raise ConfigError(f"intervention.last_k must lie in [1, {config.model.num_layers - 1}]")
        return (last_k_layers_plan(params, iv.last_k),)
    layers = _parse_layers(iv.layers, config.model.num_layers)
    subs = [s for s in iv.sublayers.replace(" ", "").split(",") if s] or None
    target = select_tags(params, layers=layers, sublayers=subs)
    target = frozenset(t for t in target if t.sublayer != "head")
    if not target:
        raise ConfigError("intervention selects no tensors")
    return (InterventionPlan(iv.kind, target),)


# ---- experiments ------------------------------------------------------------------

@dataclass
class RunSummary:
    method: str
    seeds: list
    per_seed: dict = field(default_factory=dict)   # seed -> {"final": {...}, "gap": g, ...}
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {"method": self.method, "seeds": self.seeds,
                   "per_seed": {str(k): v for k, v in self.per_seed.items()},
                   "mean": self.mean, "std": self.std}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        d = json.loads(text)
        return cls(d["method"], d["seeds"], {int(k): v for k, v in d["per_seed"].items()}, d["mean"], d["std"])


SUMMARY_KEYS = ("source", "non_source", "gap")


def aggregate(method: str, per_seed: dict) -> RunSummary:
    seeds = sorted(per_seed)
    mean, std = {}, {}
    for key in SUMMARY_KEYS:
        vals = np.array([per_seed[s][key] for s in seeds], dtype=np.float64)
        mean[key] = math.fsum(vals) / len(vals)
        std[key] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return RunSummary(method, seeds, per_seed, mean, std)


def _seed_record(result, source) -> dict:
    final = {str(k): v for k, v in result.final.items()}
    others = [v for k, v in result.final.items() if k != source]
    return {"final": final, "source": result.final[source], "non_source": math.fsum(others) / len(others),
            "gap": result.final_gap, "best_step": result.best_step}


def run_seed(config: ExperimentConfig, pretrained: ModelParams, split: DataSplit, seed: int,
             out_dir: Optional[str]) -> dict:
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        marker = os.path.join(out_dir, "FAILED")
        if os.path.exists(marker):
            os.remove(marker)
        for name in ("gap.csv", "cka.csv"):
            if os.path.exists(os.path.join(out_dir, name)):
                os.remove(os.path.join(out_dir, name))
        gap_writer = MetricsWriter(os.path.join(out_dir, "gap.csv"), gap_header(split.languages))
        cka_writer = MetricsWriter(os.path.join(out_dir, "cka.csv"), CKA_HEADER)
    plans = intervention_plans(config, _with_head(pretrained, split.kind))

    def on_eval(step, val, rec):
        if out_dir:
            gap_writer.append([step] + [val[k] for k in split.languages] + [rec.gap])

    try:
        result = finetune(pretrained, split, config.method, config.policy, config.train, seed=seed,
                          plans=plans, on_eval=on_eval)
    except Exception:
        if out_dir:
            with open(os.path.join(out_dir, "FAILED"), "w") as fh:
                fh.write(traceback.format_exc())
        raise
    record = _seed_record(result, split.languages[0])
    if out_dir:
        for row in result.cka_rows:
            cka_writer.append(list(row))
        with open(os.path.join(out_dir, "trace.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for row in result.trace:
                w.writerow(["" if isinstance(x, float) and math.isnan(x) else x for x in row])
        with open(os.path.join(out_dir, "result.json"), "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return record


def _with_head(params: ModelParams, kind: str) -> ModelParams:
    from ..model import attach_head
    return attach_head(params, kind, num_labels(kind), 0)


def run_experiment(config: ExperimentConfig, pretrained: Optional[ModelParams] = None,
                   split: Optional[DataSplit] = None, out_dir: Optional[str] = None,
                   cache_dir: Optional[str] = None) -> RunSummary:
    """Fine-tune every seed in ``config.seeds`` and aggregate the finals."""
    out_dir = out_dir if out_dir is not None else (config.output_dir or None)
    if pretrained is None:
        pretrained = cached_pretrained(config, cache_dir or os.path.join(output_root(), "cache"))
    if split is None:
        split = build_split(config)
    per_seed = {}
    for seed in config.seeds:
        seed_dir = os.path.join(out_dir, f"seed{seed}") if out_dir else None
        per_seed[seed] = run_seed(config, pretrained, split, seed, seed_dir)
        log.info("%s seed %d: source %.2f non-source %.2f gap %.2f", config.method, seed,
                 per_seed[seed]["source"], per_seed[seed]["non_source"], per_seed[seed]["gap"])
    summary = aggregate(config.method, per_seed)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            fh.write(summary.to_json())
    return summary


def _write_table(path: Optional[str], header: Sequence[str], rows: list) -> None:
    if not path:
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


PROBE_HEADER = ("layer", "kind", "source", "non_source", "gap")


def run_probe_sweep(config: ExperimentConfig, kind: str, layers: Sequence[int],
                    pretrained: Optional[ModelParams] = None, split: Optional[DataSplit] = None,
                    out_dir: Optional[str] = None, sublayers: str = "") -> list:
    """Baseline row (layer 0) plus one freeze/reinit run per layer; all with DF training."""
    if kind not in ("freeze", "reinitialize"):
        raise ConfigError(f"probe kind must be freeze or reinitialize, got {kind!r}")
    base = replace_in(config, "experiment", method="baseline_df")
    base = replace_in(base, "intervention", kind="none")
    if pretrained is None:
        pretrained = cached_pretrained(config, os.path.join(output_root(), "cache"))
    split = split or build_split(config)

    def sub(name):
        return os.path.join(out_dir, name) if out_dir else None

    rows = []
    s = run_experiment(base, pretrained, split, sub("baseline"))
    rows.append((0, "none", s.mean["source"], s.mean["non_source"], s.mean["gap"]))
    for layer in layers:
        cfg = replace_in(base, "intervention", kind=kind, layers=str(layer), sublayers=sublayers)
        s = run_experiment(cfg, pretrained, split, sub(f"{kind}-layer{layer}"))
        rows.append((layer, kind, s.mean["source"], s.mean["non_source"], s.mean["gap"]))
    _write_table(sub("probe.csv"), PROBE_HEADER, rows)
    return rows


GRID_HEADER = ("axis", "value", "method", "source", "non_source", "gap", "gap_std")


def run_grid(config: ExperimentConfig, axis: str, values: Sequence, pretrained: Optional[ModelParams] = None,
             out_dir: Optional[str] = None) -> list:
    """One experiment per value of ``axis``; returns and writes the grid table."""
    if axis not in GRID_AXES:
        raise ConfigError(f"grid axis must be one of {GRID_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("grid needs at least one value")
    if pretrained is None:
        pretrained = cached_pretrained(config, os.path.join(output_root(), "cache"))
    rows = []
    for value in values:
        if axis == "M":
            cfg = replace_in(config, "bench", few_shot_m=int(value))
        elif axis == "r_exp":
            cfg = replace_in(config, "policy", r_exp=int(value))
        else:
            cfg = replace_in(config, "policy", **{axis: float(value)})
        sub = os.path.join(out_dir, f"{axis}={value}") if out_dir else None
        s = run_experiment(cfg, pretrained, None, sub)
        rows.append((axis, value, cfg.method, s.mean["source"], s.mean["non_source"], s.mean["gap"],
                     s.std["gap"]))
    _write_table(os.path.join(out_dir, "grid.csv") if out_dir else None, GRID_HEADER, rows)
    return rows


def collect_summaries(root: str) -> list:
    """(relative directory, RunSummary) for every summary.json below ``root``."""
    found = []
    for dirpath, _, files in sorted(os.walk(root)):
        if "summary.json" in files:
            with open(os.path.join(dirpath, "summary.json")) as fh:
                found.append((os.path.relpath(dirpath, root), RunSummary.from_json(fh.read())))
    return found
