"""
Experiment configuration.

Configs are TOML (or the JSON echo a run writes as `resolved_config.json`). Every section is
a dataclass; keys that no section declares are rejected with their dotted path, and the whole
config is validated before any command touches data.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .errors import BuildError, ConfigError, SchemaError
from .interactions import FIMSpec
from .models import ARCHITECTURES, ModelConfig, TSNConfig
from .schema import DEFAULT_EMBEDDING_DIM
from .synthetic import (SyntheticFeature, SyntheticPair, SyntheticSpec,
                        default_synthetic_spec, validate_spec)
from .training import TrainConfig

OUTPUT_ROOT_ENV = "DTNLAB_OUTPUT_ROOT"
RESOLVED_CONFIG = "resolved_config.json"
SOURCES = ("synthetic", "census")
METRICS = ("auc", "logloss", "relaimpr")


def _section(cls):
    return field(default_factory=cls, metadata={"section": cls})


@dataclass(frozen=True)
class SyntheticSection:
    """Generator settings; without `features` the built-in two-task layout is used."""

    n_train: int = 20_000
    n_test: int = 5_000
    n_valid: int = 5_000
    tasks: tuple = ("ctr", "cvr")
    features: tuple = ()
    pairs: tuple = ()
    intercepts: dict = field(default_factory=dict)
    task_dependencies: dict = field(default_factory=dict)

    def to_spec(self, embedding_dim: int) -> SyntheticSpec:
        if not self.features:
            if len(self.tasks) != 2:
                raise ConfigError("the built-in layout has exactly two tasks", key_path="dataset.synthetic.tasks")
            return default_synthetic_spec(tuple(self.tasks), embedding_dim)
        features = []
        for i, entry in enumerate(self.features):
            try:
                features.append(SyntheticFeature(**entry))
            except TypeError as e:
                raise ConfigError(str(e), key_path=f"dataset.synthetic.features[{i}]") from e
        pairs = []
        for i, entry in enumerate(self.pairs):
            try:
                pairs.append(SyntheticPair(**entry))
            except TypeError as e:
                raise ConfigError(str(e), key_path=f"dataset.synthetic.pairs[{i}]") from e
        return SyntheticSpec(
            tasks=tuple(self.tasks),
            features=tuple(features),
            pairs=tuple(pairs),
            intercepts=dict(self.intercepts),
            task_dependencies={t: (p or None) for t, p in self.task_dependencies.items()},
            embedding_dim=embedding_dim,
        )


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    never_married_positive: bool = True
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    seed: int = 0
    # share of the census test file held out for model selection
    validation_fraction: float = 0.5
    synthetic: SyntheticSection = _section(SyntheticSection)


DEFAULT_FIMS = tuple({"kind": kind} for kind in ("gdcn", "memonet", "masknet", "masknet"))


@dataclass(frozen=True)
class ModelSection:
    name: str = ""
    kind: str = ""
    output_dim: int = 512
    tower_hidden: tuple = (256, 128)
    tower_overrides: dict = field(default_factory=dict)
    expert_hidden: Optional[list] = None
    num_experts: int = 4
    shared_experts: int = 2
    specific_experts: int = 2
    interaction: dict = field(default_factory=lambda: {"kind": "masknet"})
    shared_fims: tuple = DEFAULT_FIMS
    task_fims: tuple = DEFAULT_FIMS
    task_dependencies: dict = field(default_factory=dict)
    tsn: dict = field(default_factory=dict)
    parameter_budget: Optional[int] = None
    seed: int = 0
    check_finite: bool = True

    @property
    def run_name(self) -> str:
        return self.name or self.kind

    def _fim(self, entry: Any, key_path: str) -> FIMSpec:
        if not isinstance(entry, Mapping):
            raise ConfigError("must be a table", key_path=key_path)
        entry = dict(entry)
        if entry.get("output_dim", self.output_dim) != self.output_dim:
            raise ConfigError(
                f"output_dim {entry['output_dim']} differs from model.output_dim {self.output_dim}",
                key_path=f"{key_path}.output_dim",
            )
        entry["output_dim"] = self.output_dim
        try:
            return FIMSpec.from_dict(entry)
        except TypeError as e:
            raise ConfigError(str(e), key_path=key_path) from e
        except BuildError as e:
            raise ConfigError(str(e), key_path=key_path) from e

    def to_model_config(self) -> ModelConfig:
        tsn = {}
        for task, entry in self.tsn.items():
            try:
                tsn[task] = TSNConfig(**entry)
            except TypeError as e:
                raise ConfigError(str(e), key_path=f"model.tsn.{task}") from e
        return ModelConfig(
            output_dim=self.output_dim,
            tower_hidden=tuple(self.tower_hidden),
            tower_overrides={t: tuple(w) for t, w in self.tower_overrides.items()},
            expert_hidden=None if self.expert_hidden is None else tuple(self.expert_hidden),
            num_experts=self.num_experts,
            shared_experts=self.shared_experts,
            specific_experts=self.specific_experts,
            interaction=self._fim(self.interaction, "model.interaction"),
            shared_fims=tuple(self._fim(e, f"model.shared_fims[{i}]") for i, e in enumerate(self.shared_fims)),
            task_fims=tuple(self._fim(e, f"model.task_fims[{i}]") for i, e in enumerate(self.task_fims)),
            task_dependencies={t: (p or None) for t, p in self.task_dependencies.items()} or None,
            tsn=tsn,
            parameter_budget=self.parameter_budget,
            seed=self.seed,
            check_finite=self.check_finite,
        )


@dataclass(frozen=True)
class EvaluationSection:
    metrics: tuple = METRICS
    batch_size: int = 4096
    baseline_run: str = ""
    fi_repeats: int = 5
    fi_seed: int = 0
    fi_features: tuple = ()
    gate_threshold: Optional[float] = None
    keep: dict = field(default_factory=dict)
    trim_finetune_epochs: int = 0
    export_sets: tuple = ("shared",)
    export_samples: int = 1000
    export_seed: int = 0
    report_runs: tuple = ()
    report_baseline: str = "shared_bottom"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = _section(DatasetSection)
    model: ModelSection = _section(ModelSection)
    training: TrainConfig = _section(TrainConfig)
    evaluation: EvaluationSection = _section(EvaluationSection)
    output_dir: str = ""

    def model_config(self) -> ModelConfig:
        return self.model.to_model_config()

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def echo(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def output_path(self, out: Optional[str | Path] = None) -> Path:
        """`out`, else `output_dir`, else $DTNLAB_OUTPUT_ROOT/<run name>, else runs/<run name>."""
        if out:
            return Path(out)
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.model.run_name


def _default(f: dataclasses.Field) -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _coerce(value: Any, default: Any, key_path: str) -> Any:
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true or false, got {value!r}", key_path=key_path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key_path=key_path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key_path=key_path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key_path=key_path)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected an array, got {value!r}", key_path=key_path)
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, Mapping):
            raise ConfigError(f"expected a table, got {value!r}", key_path=key_path)
        return dict(value)
    return value


def _build(cls, data: Any, path: str):
    if not isinstance(data, Mapping):
        raise ConfigError("must be a table", key_path=path or None)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        key = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError("unknown key", key_path=key)
    kwargs = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        section = fields[name].metadata.get("section")
        if section is not None:
            kwargs[name] = _build(section, value, key)
        else:
            kwargs[name] = _coerce(value, _default(fields[name]), key)
    return cls(**kwargs)


def _validate(config: ExperimentConfig) -> None:
    dataset, model, evaluation = config.dataset, config.model, config.evaluation
    if dataset.source not in SOURCES:
        raise ConfigError(f"expected one of {SOURCES}, got {dataset.source!r}", key_path="dataset.source")
    if dataset.source == "census":
        for key in ("train_path", "test_path"):
            if not getattr(dataset, key):
                raise ConfigError("is required for the census source", key_path=f"dataset.{key}")
        if not 0.0 < dataset.validation_fraction < 1.0:
            raise ConfigError("must be in (0, 1)", key_path="dataset.validation_fraction")
    if dataset.embedding_dim < 1:
        raise ConfigError("must be >= 1", key_path="dataset.embedding_dim")
    if dataset.source == "synthetic":
        if min(dataset.synthetic.n_train, dataset.synthetic.n_test, dataset.synthetic.n_valid) < 1:
            raise ConfigError("split sizes must be >= 1", key_path="dataset.synthetic")
        try:
            validate_spec(dataset.synthetic.to_spec(dataset.embedding_dim))
        except SchemaError as e:
            raise ConfigError(str(e), key_path="dataset.synthetic") from e

    if not model.kind:
        raise ConfigError("is required", key_path="model.kind")
    if model.kind not in ARCHITECTURES:
        raise ConfigError(f"expected one of {ARCHITECTURES}, got {model.kind!r}", key_path="model.kind")
    if model.output_dim < 1:
        raise ConfigError("must be >= 1", key_path="model.output_dim")
    if any(w < 1 for w in model.tower_hidden):
        raise ConfigError("widths must be >= 1", key_path="model.tower_hidden")
    if model.parameter_budget is not None and model.parameter_budget < 1:
        raise ConfigError("must be >= 1", key_path="model.parameter_budget")
    model.to_model_config()

    unknown = sorted(set(evaluation.metrics) - set(METRICS))
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}", key_path="evaluation.metrics")
    if evaluation.fi_repeats < 1:
        raise ConfigError("must be >= 1", key_path="evaluation.fi_repeats")
    if evaluation.gate_threshold is not None and not 0.0 < evaluation.gate_threshold < 1.0:
        raise ConfigError("must be in (0, 1)", key_path="evaluation.gate_threshold")
    if evaluation.trim_finetune_epochs < 0:
        raise ConfigError("must be >= 0", key_path="evaluation.trim_finetune_epochs")
    if evaluation.export_samples < 1:
        raise ConfigError("must be >= 1", key_path="evaluation.export_samples")
    if evaluation.batch_size < 1:
        raise ConfigError("must be >= 1", key_path="evaluation.batch_size")


def from_mapping(data: Mapping[str, Any]) -> ExperimentConfig:
    config = _build(ExperimentConfig, data, "")
    _validate(config)
    return config


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"value = {text}")["value"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(data: Mapping[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """
    Apply `key.path=value` assignments to raw config data. Values are read as TOML
    (numbers, booleans, arrays, quoted strings); anything else is taken as a bare string.
    """
    result = json.loads(json.dumps(data))
    for override in overrides:
        key, sep, text = override.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override {override!r} is not key=value")
        parts = key.split(".")
        node = result
        for i, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError("is not a table", key_path=".".join(parts[: i + 1]))
            node = child
        node[parts[-1]] = _parse_value(text.strip())
    return result


def _load_text(text: str, fmt: str) -> dict[str, Any]:
    if fmt == "json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"syntax error: {e.msg}", line=e.lineno) from e
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = re.search(r"line (\d+)", str(e))
        line = int(match.group(1)) if match else None
        raise ConfigError(f"syntax error: {e}", line=line) from e


def parse_config(text: str, overrides: Sequence[str] = (), fmt: str = "toml") -> ExperimentConfig:
    return from_mapping(apply_overrides(_load_text(text, fmt), overrides))


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    fmt = "json" if path.suffix == ".json" else "toml"
    return parse_config(path.read_text(), overrides, fmt)


def write_resolved(config: ExperimentConfig, directory: str | Path) -> Path:
    path = Path(directory) / RESOLVED_CONFIG
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.echo())
    return path
