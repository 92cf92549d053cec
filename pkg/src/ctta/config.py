"""Experiment configuration files (YAML).

Layout::

    seed: 0                      # optional; CTTA_SEED overrides every seed below
    dataset: {num_classes, train_size, test_size, seed}
    model:   {architecture, pretrain_epochs, batch_size, lr, seed}
    stream:  {mode: standard|gradual, kinds, severity, batches_per_kind,
              batches_per_step, batch_size, rounds, reseed_rounds,
              shuffle_kinds, seed}
    adapt:   {methods: [...], ablation: bool, seed, <AdaptConfig fields>,
              augment: {...}, overrides: {method_name: {<AdaptConfig fields>}}}
    sweep:   {method}
    output:  {dir, per_batch_csv, summary_csv}
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from . import adapt, stream
from .adapt import AdaptConfig, AugmentSettings
from .errors import ConfigError

SEED_ENV = "CTTA_SEED"
SECTIONS = ("dataset", "model", "stream", "adapt", "output")


@dataclass
class DatasetSection:
    num_classes: int = 10
    train_size: int = 4000
    test_size: int = 1000
    seed: int = 0


@dataclass
class ModelSection:
    architecture: str = "cnn-small"
    pretrain_epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


@dataclass
class StreamSection:
    mode: str = "standard"
    kinds: list[str] = field(default_factory=lambda: [k.value for k in stream.ALL_KINDS])
    severity: int = 5
    batches_per_kind: int = 25
    batches_per_step: int = 3
    batch_size: int = 32
    rounds: int = 1
    reseed_rounds: bool = True
    shuffle_kinds: bool = False
    seed: int = 0

    def to_spec(self, num_classes: int) -> stream.StreamSpec:
        kinds = [stream.parse_kind(k) for k in self.kinds]
        if self.shuffle_kinds:
            kinds = stream.shuffled_orders(kinds, 1, self.seed)[0]
        if self.mode == "standard":
            spec = stream.standard_sequence(
                kinds, self.severity, self.batches_per_kind, self.batch_size, self.seed, self.rounds, num_classes
            )
        else:
            spec = stream.gradual_sequence(kinds, self.batches_per_step, self.batch_size, self.seed, self.rounds, num_classes)
        spec.reseed_rounds = self.reseed_rounds
        return spec


@dataclass
class OutputSection:
    dir: str = "results"
    per_batch_csv: bool = True
    summary_csv: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetSection
    model: ModelSection
    stream: StreamSection
    methods: dict[str, AdaptConfig]
    output: OutputSection
    sweep_method: str = "cotta"
    source_path: str | None = None

    def stream_spec(self) -> stream.StreamSpec:
        return self.stream.to_spec(self.dataset.num_classes)


def _typed(section: str, cls, raw: Any):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{section}' must be a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field (expected one of {sorted(known)})")
        default = getattr(cls(), key)
        kwargs[key] = _coerce(f"{section}.{key}", default, value)
    return cls(**kwargs)


def _coerce(path: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


ADAPT_FIELDS = {f.name for f in fields(AdaptConfig)} - {"method", "augment", "seed"}


def _adapt_config(path: str, method: str, base: dict, seed: int) -> AdaptConfig:
    defaults = AdaptConfig()
    kwargs: dict[str, Any] = {}
    for key, value in base.items():
        if key == "augment":
            try:
                kwargs["augment"] = AugmentSettings.from_dict(value or {})
            except (TypeError, ConfigError) as exc:
                raise ConfigError(f"{path}.augment: {exc}") from None
            continue
        if key not in ADAPT_FIELDS:
            raise ConfigError(f"{path}.{key}: unknown adaptation field (expected one of {sorted(ADAPT_FIELDS | {'augment'})})")
        kwargs[key] = _coerce(f"{path}.{key}", getattr(defaults, key), value)
    try:
        return AdaptConfig(method=method, seed=seed, **kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path} ({method}): {exc}") from None


def method_configs(raw_adapt: dict, seed: int) -> tuple[dict[str, AdaptConfig], dict]:
    """Named AdaptConfigs for every listed method (plus ablation rows when requested)."""
    raw_adapt = dict(raw_adapt or {})
    methods = raw_adapt.pop("methods", ["source", "bn_stats", "pseudo_label", "tent_continual", "tent_online", "cotta"])
    ablation = raw_adapt.pop("ablation", False)
    overrides = raw_adapt.pop("overrides", {}) or {}
    raw_adapt.pop("seed", None)
    if not isinstance(methods, list) or not methods:
        raise ConfigError("adapt.methods: expected a non-empty list of method names")
    if not isinstance(overrides, dict):
        raise ConfigError("adapt.overrides: expected a mapping of method name to fields")
    for name in overrides:
        if name not in methods:
            raise ConfigError(f"adapt.overrides.{name}: method is not listed in adapt.methods")
    out: dict[str, AdaptConfig] = {}
    for name in methods:
        adapt.parse_method(name)
        merged = dict(raw_adapt)
        merged.update(overrides.get(name) or {})
        out[name] = _adapt_config("adapt", name, merged, seed)
    if ablation:
        from .experiment import ablation_configs

        base = out.get("cotta") or _adapt_config("adapt", "cotta", raw_adapt, seed)
        for name, cfg in ablation_configs(base).items():
            out.setdefault(name, cfg)
    return out, raw_adapt


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{source}: YAML syntax error at {where}: {problem}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping with sections {SECTIONS}")
    unknown = set(raw) - set(SECTIONS) - {"seed", "sweep"}
    if unknown:
        raise ConfigError(f"{source}: unknown top-level section(s) {sorted(unknown)}")
    for required in ("model", "stream"):
        if required not in raw:
            raise ConfigError(f"{source}: missing required section '{required}'")

    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            global_seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    else:
        global_seed = raw.get("seed")

    sections = {k: dict(raw.get(k) or {}) if isinstance(raw.get(k) or {}, dict) else raw.get(k) for k in SECTIONS}
    for name in SECTIONS:
        if not isinstance(sections[name], dict):
            raise ConfigError(f"{source}: section '{name}' must be a mapping")
        if global_seed is not None and name != "output" and (env_seed is not None or "seed" not in sections[name]):
            sections[name]["seed"] = global_seed

    dataset = _typed("dataset", DatasetSection, sections["dataset"])
    model = _typed("model", ModelSection, sections["model"])
    stream_sec = _typed("stream", StreamSection, sections["stream"])
    output = _typed("output", OutputSection, sections["output"])
    if stream_sec.mode not in ("standard", "gradual"):
        raise ConfigError(f"stream.mode: expected 'standard' or 'gradual', got {stream_sec.mode!r}")
    for k in stream_sec.kinds:
        try:
            stream.parse_kind(k)
        except ConfigError as exc:
            raise ConfigError(f"stream.kinds: {exc}") from None
    adapt_seed = sections["adapt"].get("seed", 0)
    if not isinstance(adapt_seed, int):
        raise ConfigError(f"adapt.seed: expected an integer, got {adapt_seed!r}")
    methods, _ = method_configs(sections["adapt"], adapt_seed)
    sweep = raw.get("sweep") or {}
    if not isinstance(sweep, dict):
        raise ConfigError("sweep: expected a mapping")
    sweep_method = sweep.get("method", "cotta")
    adapt.parse_method(sweep_method)
    return ExperimentConfig(dataset, model, stream_sec, methods, output, sweep_method, source)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text, str(path))
    return cfg


SWEEP_PARAMS = {"alpha": float, "p_th": float, "restore_p": float, "n_aug": int}


def parse_sweep_values(param: str, values: str) -> list:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}, got {param!r}")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise ConfigError("sweep needs at least one value")
    conv = SWEEP_PARAMS[param]
    out = []
    for v in items:
        try:
            out.append(conv(v))
        except ValueError:
            raise ConfigError(f"sweep value {v!r} is not a valid {conv.__name__} for {param}") from None
    return out


