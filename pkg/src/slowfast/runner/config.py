"""Experiment configuration: INI files with ``[section]`` blocks plus ``--set`` overrides."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

from ..bench import GrammarSpec
from ..model import ModelConfig
from ..schedule import PolicyConfig, ScheduleConfigError
from .pipeline import METHODS, TrainSettings


class ConfigError(ValueError):
    """Bad configuration; the CLI maps it to exit status 1."""


@dataclass(frozen=True)
class BenchConfig:
    task: str = "classification"
    num_languages: int = 4
    pretrain_per_language: int = 10_000
    code_switch_rate: float = 0.3
    n_train: int = 4000
    n_validation: int = 2000
    n_test: int = 2000
    few_shot_m: int = 0
    few_shot_pool: int = 20
    language_seed: int = 0
    corpus_seed: int = 11
    split_seed: int = 3


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    mask_rate: float = 0.15
    warmup_fraction: float = 0.1
    seed: int = 0
    corpus_seed: int = 1


@dataclass(frozen=True)
class InterventionConfig:
    kind: str = "none"          # none | freeze | reinitialize | last_k
    layers: str = ""            # e.g. "1,2" or "1-4"; empty = every layer
    sublayers: str = ""         # e.g. "feed_forward"; empty = every sublayer
    last_k: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    intervention: InterventionConfig = field(default_factory=InterventionConfig)
    method: str = "slow_and_fast"
    seeds: tuple = (1, 2, 3, 4)
    output_dir: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"experiment.method must be one of {METHODS}, got {self.method!r}")
        if not self.seeds:
            raise ConfigError("experiment.seeds must not be empty")
        if self.bench.task not in ("classification", "tagging"):
            raise ConfigError(f"bench.task must be classification or tagging, got {self.bench.task!r}")
        if self.intervention.kind not in ("none", "freeze", "reinitialize", "last_k"):
            raise ConfigError(f"intervention.kind not understood: {self.intervention.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def pretrain_key(self) -> str:
        """Hash of everything the pre-trained checkpoint depends on."""
        payload = {"model": asdict(self.model), "pretrain": asdict(self.pretrain),
                   "languages": [self.bench.num_languages, self.bench.language_seed],
                   "corpus": [self.bench.pretrain_per_language, self.bench.code_switch_rate],
                   "grammar": GrammarSpec().digest()}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


SECTIONS = ("model", "bench", "pretrain", "policy", "train", "intervention")


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _parse_seeds(raw: str) -> tuple:
    try:
        return tuple(int(s) for s in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"experiment.seeds: expected integers, got {raw!r}") from None


def _build(cls, values: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kw = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        kw[key] = _coerce(raw, getattr(defaults, key), f"{section}.{key}")
    try:
        return cls(**kw)
    except (ValueError, ScheduleConfigError) as e:
        raise ConfigError(f"[{section}] {e}") from None


def build_config(values: dict) -> ExperimentConfig:
    """``values`` maps section -> {key: raw string}."""
    unknown = set(values) - set(SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    parts = {
        "model": _build(ModelConfig, values.get("model", {}), "model"),
        "bench": _build(BenchConfig, values.get("bench", {}), "bench"),
        "pretrain": _build(PretrainConfig, values.get("pretrain", {}), "pretrain"),
        "policy": _build(PolicyConfig, values.get("policy", {}), "policy"),
        "train": _build(TrainSettings, values.get("train", {}), "train"),
        "intervention": _build(InterventionConfig, values.get("intervention", {}), "intervention"),
    }
    exp = dict(values.get("experiment", {}))
    extra = set(exp) - {"method", "seeds", "output_dir"}
    if extra:
        raise ConfigError(f"unknown key(s) in [experiment]: {sorted(extra)}")
    kw = {}
    if "method" in exp:
        kw["method"] = exp["method"].strip()
    if "seeds" in exp:
        kw["seeds"] = _parse_seeds(exp["seeds"])
    if "output_dir" in exp:
        kw["output_dir"] = exp["output_dir"].strip()
    return ExperimentConfig(**parts, **kw)


def parse_overrides(items: Iterable[str]) -> dict:
    """``["policy.c1=0.1", ...]`` -> {"policy": {"c1": "0.1"}}."""
    out: dict = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = value
    return out


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    values: dict = {}
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        except configparser.Error as e:
            raise ConfigError(f"malformed config file {path}: {e}") from None
        for section in parser.sections():
            values[section] = dict(parser.items(section))
    for section, kv in parse_overrides(overrides).items():
        values.setdefault(section, {}).update(kv)
    return build_config(values)


def replace_in(config: ExperimentConfig, section: str, **changes) -> ExperimentConfig:
    """Copy of ``config`` with fields of one section replaced."""
    if section == "experiment":
        return dataclasses.replace(config, **changes)
    try:
        part = dataclasses.replace(getattr(config, section), **changes)
    except (ValueError, ScheduleConfigError) as e:
        raise ConfigError(f"[{section}] {e}") from None
    return dataclasses.replace(config, **{section: part})


def dump_config(config: ExperimentConfig) -> str:
    """INI text that :func:`load_config` reads back into an equal config."""
    lines = []
    d = config.to_dict()
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in d[section].items():
            if isinstance(value, float) and math.isinf(value):
                value = "inf" if value > 0 else "-inf"
            lines.append(f"{key} = {value}")
        lines.append("")
    lines.append("[experiment]")
    lines.append(f"method = {config.method}")
    lines.append("seeds = " + " ".join(str(s) for s in config.seeds))
    lines.append(f"output_dir = {config.output_dir}")
    return "\n".join(lines) + "\n"
